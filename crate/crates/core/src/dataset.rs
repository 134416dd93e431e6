//! Paired clear/foggy datasets, in memory and on disk.
//!
//! On-disk layout of one split:
//!
//! ```text
//! <split>/image_2/000000.png        clear image, 16-bit RGB
//! <split>/fog_0.10/000000.png       foggy image for density 0.10
//! <split>/depth/000000.bin          u32 height, u32 width, f64 values (LE)
//! <split>/label_2/000000.txt        KITTI labels
//! <split>/calib/000000.txt          P2 line
//! <split>/manifest.csv              one row per (scene, density)
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fog::{fog_scene, FogParams};
use crate::kitti;
use crate::scene::{generate_scene, ColorImage, DepthMap, FogPair, SceneConfig};

/// Generates `count` fogged scenes with seeds `first_seed..first_seed+count`.
pub fn build_pairs(cfg: &SceneConfig, first_seed: u64, count: usize, density: f64) -> Result<Vec<FogPair>> {
    let params = FogParams::estimated(density)?;
    (0..count as u64)
        .map(|i| {
            let scene = generate_scene(first_seed + i, cfg)?;
            fog_scene(&scene, &params)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub clear: String,
    pub foggy: String,
    pub depth: String,
    pub label: String,
    pub calib: String,
    pub density: f64,
}

pub fn density_dir(density: f64) -> String {
    format!("fog_{density:.2}")
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn write_png(path: &Path, img: &ColorImage) -> Result<()> {
    let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(img.width as u32, img.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (img.data[i * 3 + c].clamp(0.0, 1.0) * 65535.0).round() as u16;
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .flat_map(|p| p.0.map(|v| v as f64 / 65535.0))
        .collect();
    ColorImage::new(h as usize, w as usize, data)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_u32::<LittleEndian>(depth.height as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(depth.width as u32).map_err(io)?;
    for v in &depth.values {
        w.write_f64::<LittleEndian>(*v).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io = |e| Error::io(path, e);
    let h = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut values = vec![0.0; h * w];
    r.read_f64_into::<LittleEndian>(&mut values).map_err(io)?;
    DepthMap::new(h, w, values)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

/// Writes one split holding every density variant of the same clear scenes.
/// `variants[k]` are the pairs for density `k`; all share seeds and order.
pub fn write_split(dir: &Path, variants: &[Vec<FogPair>]) -> Result<Vec<ManifestRow>> {
    let first = variants
        .first()
        .ok_or_else(|| Error::InvalidArgument("no density variants".into()))?;
    for sub in ["image_2", "depth", "label_2", "calib"] {
        create_dir(&dir.join(sub))?;
    }
    for (i, pair) in first.iter().enumerate() {
        let id = format!("{i:06}");
        write_png(&dir.join("image_2").join(format!("{id}.png")), &pair.clear_image)?;
        write_depth(&dir.join("depth").join(format!("{id}.bin")), &pair.depth)?;
        let labels: Vec<String> = pair
            .annotations
            .iter()
            .map(kitti::format_kitti_label_exact)
            .collect();
        let mut text = labels.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        write_text(&dir.join("label_2").join(format!("{id}.txt")), &text)?;
        write_text(
            &dir.join("calib").join(format!("{id}.txt")),
            &kitti::serialize_kitti_calib(&pair.calib),
        )?;
    }
    let mut rows = Vec::new();
    for pairs in variants {
        if pairs.len() != first.len() {
            return Err(Error::InvalidArgument("density variants differ in length".into()));
        }
        let Some(d) = pairs.first().map(|p| p.density) else {
            continue;
        };
        let fog_dir = density_dir(d);
        create_dir(&dir.join(&fog_dir))?;
        for (i, pair) in pairs.iter().enumerate() {
            let id = format!("{i:06}");
            let foggy = format!("{fog_dir}/{id}.png");
            write_png(&dir.join(&foggy), &pair.foggy_image)?;
            rows.push(ManifestRow {
                id: id.clone(),
                seed: pair.seed,
                clear: format!("image_2/{id}.png"),
                foggy,
                depth: format!("depth/{id}.bin"),
                label: format!("label_2/{id}.txt"),
                calib: format!("calib/{id}.txt"),
                density: pair.density,
            });
        }
    }
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(dir.join("manifest.csv"))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Loads the pairs of one density from a split written by [`write_split`].
pub fn read_split(dir: &Path, density: f64) -> Result<Vec<FogPair>> {
    let rows: Vec<ManifestRow> = read_manifest(dir)?
        .into_iter()
        .filter(|r| (r.density - density).abs() < 1e-9)
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {} has no pairs with density {density}",
            dir.display()
        )));
    }
    rows.iter()
        .map(|r| {
            let p = |s: &str| -> PathBuf { dir.join(s) };
            Ok(FogPair {
                seed: r.seed,
                clear_image: read_png(&p(&r.clear))?,
                foggy_image: read_png(&p(&r.foggy))?,
                depth: read_depth(&p(&r.depth))?,
                annotations: kitti::parse_kitti_labels(&read_text(&p(&r.label))?)?,
                calib: kitti::parse_kitti_calib(&read_text(&p(&r.calib))?)?,
                density: r.density,
            })
        })
        .collect()
}

/// Loads clear images with labels and calibration from a plain directory of
/// `image_2/`, `label_2/`, `calib/` files (no foggy counterpart).
pub fn read_clear_dir(dir: &Path) -> Result<Vec<(String, ColorImage, Vec<crate::scene::SceneAnnotation>, crate::scene::CalibMatrix)>> {
    let img_dir = dir.join("image_2");
    let mut ids: Vec<String> = fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "png" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let img = read_png(&img_dir.join(format!("{id}.png")))?;
            let labels = dir.join("label_2").join(format!("{id}.txt"));
            let ann = if labels.exists() {
                kitti::parse_kitti_labels(&read_text(&labels)?)?
            } else {
                Vec::new()
            };
            let calib = kitti::parse_kitti_calib(&read_text(&dir.join("calib").join(format!("{id}.txt")))?)?;
            Ok((id, img, ann, calib))
        })
        .collect()
}

/// Fogs every clear scene of `input` (a split written by [`write_split`] or
/// any directory with `image_2/`, `depth/`, `label_2/` and `calib/`) at
/// `density` and writes the pairs as a new split under `output`.
pub fn fog_directory(input: &Path, output: &Path, density: f64) -> Result<Vec<ManifestRow>> {
    let params = FogParams::estimated(density)?;
    let pairs = read_clear_dir(input)?
        .into_iter()
        .enumerate()
        .map(|(i, (id, image, annotations, calib))| {
            let depth = read_depth(&input.join("depth").join(format!("{id}.bin")))?;
            let scene = crate::scene::Scene {
                seed: id.parse().unwrap_or(i as u64),
                image,
                depth,
                annotations,
                calib,
            };
            fog_scene(&scene, &params)
        })
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("no images under {}", input.join("image_2").display())));
    }
    write_split(output, &[pairs])
}
