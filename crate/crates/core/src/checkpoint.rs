//! Binary checkpoints for parameter stores, codebooks and schedules.
//!
//! All integers and floats are little-endian. A parameter checkpoint is
//!
//! ```text
//! b"WXDETCKP"  u32 version  u32 hash_len  hash bytes (utf-8)  u64 step
//! u64 tensor_count
//! per tensor: u32 name_len  name  u32 rank  u64 dims[rank]  f64 values
//! u64 schedule_len  f64 betas[schedule_len]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::codebook::WeatherCodebook;
use crate::diffusion::VarianceSchedule;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WXDETCKP";
pub const VERSION: u32 = 1;
const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;

/// Contents of one checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    /// Empty when the model has no diffusion stage.
    pub betas: Vec<f64>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_hash: &str, step: u64, schedule: Option<&VarianceSchedule>) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            step,
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            betas: schedule.map(|s| s.betas().to_vec()).unwrap_or_default(),
        }
    }

    pub fn schedule(&self) -> Result<Option<VarianceSchedule>> {
        if self.betas.is_empty() {
            return Ok(None);
        }
        VarianceSchedule::from_betas(self.betas.clone()).map(Some)
    }

    /// Copies the stored tensors into `store`, matching by name and shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::shape("checkpoint", store.get(id).shape(), t.shape()));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_str(w, &self.config_hash)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u64::<LittleEndian>(self.tensors.len() as u64)?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            write_f64s(w, t.data())?;
        }
        w.write_u64::<LittleEndian>(self.betas.len() as u64)?;
        write_f64s(w, &self.betas)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = read_str(r)?;
        let step = r.read_u64::<LittleEndian>().map_err(fmt)?;
        let n = r.read_u64::<LittleEndian>().map_err(fmt)?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = read_str(r)?;
            let rank = r.read_u32::<LittleEndian>().map_err(fmt)?;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(fmt)?;
            let data = read_f64s(r, shape.iter().product())?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let t = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let betas = read_f64s(r, t)?;
        Ok(Self {
            config_hash,
            step,
            tensors,
            betas,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let fmt = |e: std::io::Error| Error::Checkpoint(format!("truncated string: {e}"));
    let len = r.read_u32::<LittleEndian>().map_err(fmt)?;
    if len > MAX_NAME {
        return Err(Error::Checkpoint(format!("string length {len} too large")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(fmt)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not utf-8".into()))
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        out.push(
            r.read_f64::<LittleEndian>()
                .map_err(|e| Error::Checkpoint(format!("truncated data: {e}")))?,
        );
    }
    Ok(out)
}

/// Codebook blob: `u64 K, u64 c`, then `K·c` row-major f64 values.
pub fn write_codebook<W: Write>(w: &mut W, codebook: &WeatherCodebook) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(codebook.len() as u64)?;
    w.write_u64::<LittleEndian>(codebook.dim() as u64)?;
    write_f64s(w, codebook.slots().data())
}

pub fn read_codebook<R: Read>(r: &mut R) -> Result<WeatherCodebook> {
    let fmt = |e: std::io::Error| Error::Checkpoint(format!("truncated codebook: {e}"));
    let k = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
    let c = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
    let n = k
        .checked_mul(c)
        .ok_or_else(|| Error::Checkpoint("codebook shape overflows".into()))?;
    WeatherCodebook::from_tensor(Tensor::new(vec![k, c], read_f64s(r, n)?)?)
}

pub fn save_codebook(path: &Path, codebook: &WeatherCodebook) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_codebook(&mut w, codebook)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_codebook(path: &Path) -> Result<WeatherCodebook> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_codebook(&mut BufReader::new(f))
}

#[derive(serde::Serialize)]
struct UsageRow {
    slot: usize,
    count: usize,
}

/// Slot-usage histogram as `slot,count` rows.
pub fn write_slot_usage(path: &Path, usage: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (slot, &count) in usage.iter().enumerate() {
        w.serialize(UsageRow { slot, count })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffusion::make_schedule;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("encoder.w", Tensor::randn(&[3, 3, 2], &mut rng));
        s.add("head.b", Tensor::randn(&[5], &mut rng));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let sched = make_schedule(15, 1e-4, 0.05).unwrap();
        let ck = Checkpoint::from_store(&s, "abc123", 42, Some(&sched));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.schedule().unwrap().unwrap(), sched);
        let mut other = store();
        other.get_mut(crate::nn::ParamId(0)).data_mut()[0] = 9.0;
        back.load_into(&mut other).unwrap();
        assert_eq!(other.tensors(), s.tensors());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint::from_store(&store(), "h", 0, None);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        let mut wrong = ParamStore::new();
        wrong.add("encoder.w", Tensor::zeros(&[2, 2]));
        wrong.add("head.b", Tensor::zeros(&[5]));
        assert!(ck.load_into(&mut wrong).is_err());
    }

    #[test]
    fn codebook_blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = WeatherCodebook::random(7, 5, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_codebook(&mut buf, &cb).unwrap();
        assert_eq!(buf.len(), 16 + 7 * 5 * 8);
        assert_eq!(&buf[..8], &7u64.to_le_bytes());
        assert_eq!(read_codebook(&mut buf.as_slice()).unwrap(), cb);
    }
}
