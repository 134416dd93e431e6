//! Weather codebook: nearest-slot quantization and the clear-knowledge
//! recalling loss (channel-distribution KL plus reference matching).

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::tensor::Tensor;

/// Floor applied to reference probabilities inside the KL term.
pub const PROB_FLOOR: f64 = 1e-12;

/// `K` learnable slots of dimension `c`, stored row-major as a `K × c` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherCodebook {
    slots: Tensor,
}

impl WeatherCodebook {
    pub fn from_tensor(slots: Tensor) -> Result<Self> {
        let (k, _) = slots.dims2()?;
        if k == 0 {
            return Err(Error::InvalidArgument("codebook needs at least one slot".into()));
        }
        Ok(Self { slots })
    }

    /// Slots drawn uniformly from `[-1/K, 1/K]`.
    pub fn random<R: Rng + ?Sized>(slots: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if slots == 0 || dim == 0 {
            return Err(Error::InvalidArgument("codebook needs K ≥ 1 and c ≥ 1".into()));
        }
        let bound = 1.0 / slots as f64;
        Self::from_tensor(Tensor::uniform(&[slots, dim], -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.slots.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.slots.shape()[1]
    }

    pub fn slots(&self) -> &Tensor {
        &self.slots
    }

    pub fn slot(&self, k: usize) -> &[f64] {
        self.slots.row(k, self.dim())
    }
}

/// Index of the nearest slot (squared Euclidean distance) for every row of
/// `points`; ties go to the smallest index.
pub fn nearest_slots(points: &Tensor, slots: &Tensor) -> Result<Vec<usize>> {
    let c = *points.shape().last().unwrap_or(&0);
    let (k, dim) = slots.dims2()?;
    if c != dim {
        return Err(Error::shape("quantize", &[dim], &[c]));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("empty codebook".into()));
    }
    let n = points.len() / c.max(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = points.row(i, c);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let z = slots.row(j, c);
            let d: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Replaces every spatial vector by its nearest slot.
pub fn quantize(
    feature: &FeatureMap,
    codebook: &WeatherCodebook,
) -> Result<(FeatureMap, Vec<usize>)> {
    let indices = nearest_slots(feature.tensor(), codebook.slots())?;
    let c = codebook.dim();
    let mut data = Vec::with_capacity(feature.data().len());
    for &i in &indices {
        data.extend_from_slice(codebook.slot(i));
    }
    let (h, w, _) = feature.dims();
    Ok((FeatureMap::new(h, w, c, data)?, indices))
}

/// Differentiable quantization: forward value equals [`quantize`], the
/// feature receives the upstream gradient unchanged and each selected slot
/// accumulates the gradient of the positions that chose it.
pub fn quantize_with_gradient<'t>(
    feature: Var<'t>,
    slots: Var<'t>,
) -> Result<(Var<'t>, Vec<usize>)> {
    let indices = nearest_slots(&feature.value(), &slots.value())?;
    let out = feature.straight_through_gather(slots, &indices)?;
    Ok((out, indices))
}

/// Quantization with indices fixed in advance: `slots[indices] + (x − base)`.
///
/// At `x == base` this has the same value and the same derivatives as
/// [`quantize_with_gradient`], but it is smooth in every input, so it can be
/// probed with finite differences.
pub fn quantize_frozen<'t>(
    feature: Var<'t>,
    slots: Var<'t>,
    indices: &[usize],
    base: &Tensor,
) -> Result<Var<'t>> {
    let tape = feature.tape();
    let base = tape.constant(base.clone());
    let gathered = base.straight_through_gather(slots, indices)?;
    gathered.add(feature.sub(base)?)
}

/// Channel importance as a probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDistribution {
    pub probs: Vec<f64>,
}

impl ChannelDistribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Global average pooling over positions followed by a softmax over channels.
pub fn channel_distribution(feature: &FeatureMap) -> ChannelDistribution {
    let tape = Tape::new();
    let x = tape.constant(feature.tensor().clone());
    let probs = channel_distribution_var(x)
        .expect("pooled vector reshapes to a single row")
        .value()
        .data()
        .to_vec();
    ChannelDistribution { probs }
}

pub fn channel_distribution_var(feature: Var<'_>) -> Result<Var<'_>> {
    let pooled = feature.mean_rows();
    let c = pooled.value().len();
    pooled.reshape(&[1, c])?.softmax_rows()
}

/// `D_KL(s_clear ‖ s_ref)`.
pub fn cke_loss(s_clear: &ChannelDistribution, s_ref: &ChannelDistribution) -> Result<f64> {
    if s_clear.len() != s_ref.len() {
        return Err(Error::shape("cke_loss", &[s_clear.len()], &[s_ref.len()]));
    }
    let tape = Tape::new();
    let p = tape.constant(Tensor::from_parts(vec![s_clear.len()], s_clear.probs.clone()));
    let q = tape.constant(Tensor::from_parts(vec![s_ref.len()], s_ref.probs.clone()));
    Ok(p.kl_divergence(q, PROB_FLOOR)?.item())
}

/// Reduction applied to the squared reference difference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WigReduction {
    #[default]
    Mean,
    Sum,
}

pub fn wig_loss_var<'t>(
    ref_clear: Var<'t>,
    ref_foggy: Var<'t>,
    reduction: WigReduction,
) -> Result<Var<'t>> {
    let sq = ref_clear.sub(ref_foggy)?.square();
    Ok(match reduction {
        WigReduction::Mean => sq.mean(),
        WigReduction::Sum => sq.sum(),
    })
}

/// Mean squared difference between the clear and foggy references.
pub fn wig_loss(ref_clear: &FeatureMap, ref_foggy: &FeatureMap) -> Result<f64> {
    ref_clear.same_shape(ref_foggy, "wig_loss")?;
    let tape = Tape::new();
    let a = tape.constant(ref_clear.tensor().clone());
    let b = tape.constant(ref_foggy.tensor().clone());
    Ok(wig_loss_var(a, b, WigReduction::Mean)?.item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkrDiagnostics {
    pub cke: f64,
    pub wig: f64,
    /// Selection count per slot over both references.
    pub slot_usage: Vec<usize>,
}

/// Loss terms of one clear/foggy pair as tape variables.
pub struct CkrTerms<'t> {
    pub total: Var<'t>,
    pub cke: Var<'t>,
    pub wig: Var<'t>,
    pub ref_clear: Var<'t>,
    pub ref_foggy: Var<'t>,
    pub indices_clear: Vec<usize>,
    pub indices_foggy: Vec<usize>,
}

/// Fixed quantization indices for both branches, used for gradient probes.
#[derive(Clone, Debug)]
pub struct FrozenIndices {
    pub clear: (Vec<usize>, Tensor),
    pub foggy: (Vec<usize>, Tensor),
}

pub fn ckr_loss_var<'t>(
    clear: Var<'t>,
    foggy: Var<'t>,
    slots: Var<'t>,
    reduction: WigReduction,
    frozen: Option<&FrozenIndices>,
) -> Result<CkrTerms<'t>> {
    if clear.shape() != foggy.shape() {
        return Err(Error::shape("ckr_loss", &clear.shape(), &foggy.shape()));
    }
    let (ref_clear, indices_clear, ref_foggy, indices_foggy) = match frozen {
        None => {
            let (rc, ic) = quantize_with_gradient(clear, slots)?;
            let (rf, iff) = quantize_with_gradient(foggy, slots)?;
            (rc, ic, rf, iff)
        }
        Some(f) => (
            quantize_frozen(clear, slots, &f.clear.0, &f.clear.1)?,
            f.clear.0.clone(),
            quantize_frozen(foggy, slots, &f.foggy.0, &f.foggy.1)?,
            f.foggy.0.clone(),
        ),
    };
    let s_clear = channel_distribution_var(clear)?;
    // The reference distribution is the slots' target: it reaches the
    // feature only through s_clear, not through the straight-through path.
    let slot_ref = clear.detach().straight_through_gather(slots, &indices_clear)?;
    let s_ref = channel_distribution_var(slot_ref)?;
    let cke = s_clear.kl_divergence(s_ref, PROB_FLOOR)?;
    let wig = wig_loss_var(ref_clear, ref_foggy, reduction)?;
    let total = cke.add(wig)?;
    Ok(CkrTerms {
        total,
        cke,
        wig,
        ref_clear,
        ref_foggy,
        indices_clear,
        indices_foggy,
    })
}

pub fn slot_histogram(k: usize, indices: &[&[usize]]) -> Vec<usize> {
    let mut hist = vec![0; k];
    for set in indices {
        for &i in *set {
            hist[i] += 1;
        }
    }
    hist
}

/// Clear-knowledge recalling loss of a clear/foggy feature pair.
pub fn ckr_loss(
    clear: &FeatureMap,
    foggy: &FeatureMap,
    codebook: &WeatherCodebook,
) -> Result<(f64, CkrDiagnostics)> {
    clear.same_shape(foggy, "ckr_loss")?;
    let tape = Tape::new();
    let terms = ckr_loss_var(
        tape.constant(clear.tensor().clone()),
        tape.constant(foggy.tensor().clone()),
        tape.constant(codebook.slots().clone()),
        WigReduction::Mean,
        None,
    )?;
    let slot_usage = slot_histogram(
        codebook.len(),
        &[&terms.indices_clear, &terms.indices_foggy],
    );
    Ok((
        terms.total.item(),
        CkrDiagnostics {
            cke: terms.cke.item(),
            wig: terms.wig.item(),
            slot_usage,
        },
    ))
}
