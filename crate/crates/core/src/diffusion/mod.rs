//! Weather-adaptive diffusion in feature space.
//!
//! The forward process injects the standardized clear/foggy feature residual
//! instead of Gaussian noise; the reverse process is a deterministic chain
//! driven by a noise-predicting denoiser conditioned on a reference feature.

mod attention;
mod denoiser;

pub use attention::{
    attention_probabilities, cross_attention, cross_attention_var, AttentionConfig,
    AttentionWeights, CrossAttention,
};
pub use denoiser::{sinusoidal_table, Denoiser, DenoiserConfig};

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::nn::{Bound, ParamStore};

/// Standard deviation floor used when standardizing the fog residual.
pub const RESIDUAL_STD_FLOOR: f64 = 1e-6;

/// β₁..β_T with α_t = 1 − β_t and ᾱ_t = Π_{s≤t} α_s. Timesteps are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T ≥ 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("β = {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Linear β schedule from `beta_start` to `beta_end` over `t` steps.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<VarianceSchedule> {
    if t == 0 {
        return Err(Error::InvalidArgument("schedule needs T ≥ 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    };
    VarianceSchedule::from_betas(betas)
}

/// Standardized clear-to-foggy feature residual.
#[derive(Clone, Debug, PartialEq)]
pub struct FogResidual {
    pub values: FeatureMap,
    pub mean: f64,
    pub std: f64,
}

impl FogResidual {
    /// `values · std + mean`.
    pub fn raw(&self) -> FeatureMap {
        let t = self.values.tensor().map(|v| v * self.std + self.mean);
        FeatureMap::from_tensor(t).expect("rank preserved")
    }
}

pub fn fog_residual(clear: &FeatureMap, foggy: &FeatureMap) -> Result<FogResidual> {
    clear.same_shape(foggy, "fog_residual")?;
    let tape = crate::autograd::Tape::new();
    let (v, mean, std) = fog_residual_var(
        tape.constant(clear.tensor().clone()),
        tape.constant(foggy.tensor().clone()),
    )?;
    Ok(FogResidual {
        values: FeatureMap::from_tensor((*v.value()).clone())?,
        mean,
        std,
    })
}

/// Differentiable residual: `standardize(foggy − clear)`; returns the
/// standardized values with the mean and std used.
pub fn fog_residual_var<'t>(clear: Var<'t>, foggy: Var<'t>) -> Result<(Var<'t>, f64, f64)> {
    if clear.shape() != foggy.shape() {
        return Err(Error::shape("fog_residual", &clear.shape(), &foggy.shape()));
    }
    Ok(foggy.sub(clear)?.standardize(RESIDUAL_STD_FLOOR))
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(
    x0: &FeatureMap,
    t: usize,
    eps: &FogResidual,
    schedule: &VarianceSchedule,
) -> Result<FeatureMap> {
    schedule.check_step(t)?;
    x0.same_shape(&eps.values, "forward_diffuse")?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    FeatureMap::from_tensor(x0.tensor().zip_map(eps.values.tensor(), |x, e| a * x + b * e))
}

pub fn forward_diffuse_var<'t>(
    x0: Var<'t>,
    t: usize,
    eps: Var<'t>,
    schedule: &VarianceSchedule,
) -> Result<Var<'t>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    x0.scale(ab.sqrt()).add(eps.scale((1.0 - ab).sqrt()))
}

/// One deterministic reverse step:
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε_θ) / √α_t`.
pub fn reverse_step(
    x_t: &FeatureMap,
    t: usize,
    eps_pred: &FeatureMap,
    schedule: &VarianceSchedule,
) -> Result<FeatureMap> {
    schedule.check_step(t)?;
    x_t.same_shape(eps_pred, "reverse_step")?;
    let (k, inv) = reverse_coefficients(t, schedule);
    FeatureMap::from_tensor(x_t.tensor().zip_map(eps_pred.tensor(), |x, e| (x - k * e) * inv))
}

fn reverse_coefficients(t: usize, s: &VarianceSchedule) -> (f64, f64) {
    (
        s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt(),
        1.0 / s.alpha(t).sqrt(),
    )
}

pub fn reverse_step_var<'t>(
    x_t: Var<'t>,
    t: usize,
    eps_pred: Var<'t>,
    schedule: &VarianceSchedule,
) -> Result<Var<'t>> {
    schedule.check_step(t)?;
    let (k, inv) = reverse_coefficients(t, schedule);
    Ok(x_t.sub(eps_pred.scale(k))?.scale(inv))
}

/// Runs the reverse chain from `x_T = input` down to `x_0` with an arbitrary
/// noise predictor `predict(x_t, t)`.
pub fn reverse_chain<F>(input: &FeatureMap, schedule: &VarianceSchedule, mut predict: F) -> Result<FeatureMap>
where
    F: FnMut(&FeatureMap, usize) -> Result<FeatureMap>,
{
    let mut x = input.clone();
    for t in (1..=schedule.len()).rev() {
        let eps = predict(&x, t)?;
        x = reverse_step(&x, t, &eps, schedule)?;
    }
    Ok(x)
}

/// Enhances `input` over every step of `schedule` with a trained denoiser.
pub fn reverse_enhance(
    input: &FeatureMap,
    reference: &FeatureMap,
    denoiser: &Denoiser,
    params: &ParamStore,
    schedule: &VarianceSchedule,
) -> Result<FeatureMap> {
    denoiser.check_ready(params, schedule)?;
    reverse_chain(input, schedule, |x, t| {
        denoiser.predict_values(params, x, t, reference)
    })
}

/// Differentiable reverse chain.
pub fn reverse_enhance_var<'t>(
    p: &Bound<'t>,
    denoiser: &Denoiser,
    input: Var<'t>,
    reference: Var<'t>,
    schedule: &VarianceSchedule,
) -> Result<Var<'t>> {
    if denoiser.config().timesteps != schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "denoiser trained for T = {}, schedule has {}",
            denoiser.config().timesteps,
            schedule.len()
        )));
    }
    let mut x = input;
    for t in (1..=schedule.len()).rev() {
        let eps = denoiser.predict(p, x, t, reference)?;
        x = reverse_step_var(x, t, eps, schedule)?;
    }
    Ok(x)
}

/// `mean((ε − ε_θ(x_t, t, x^r))²)` with `x_t` from [`forward_diffuse_var`].
pub fn wae_loss_var<'t>(
    p: &Bound<'t>,
    denoiser: &Denoiser,
    x0: Var<'t>,
    t: usize,
    eps: Var<'t>,
    reference: Var<'t>,
    schedule: &VarianceSchedule,
) -> Result<Var<'t>> {
    let x_t = forward_diffuse_var(x0, t, eps, schedule)?;
    let pred = denoiser.predict(p, x_t, t, reference)?;
    eps.mse(pred)
}

pub fn wae_loss(
    x0: &FeatureMap,
    t: usize,
    eps: &FogResidual,
    reference: &FeatureMap,
    denoiser: &Denoiser,
    params: &ParamStore,
    schedule: &VarianceSchedule,
) -> Result<f64> {
    wae_loss_with(x0, t, eps, schedule, |x, t| {
        denoiser.predict_values(params, x, t, reference)
    })
}

/// WAE loss for an arbitrary noise predictor.
pub fn wae_loss_with<F>(
    x0: &FeatureMap,
    t: usize,
    eps: &FogResidual,
    schedule: &VarianceSchedule,
    predict: F,
) -> Result<f64>
where
    F: FnOnce(&FeatureMap, usize) -> Result<FeatureMap>,
{
    let x_t = forward_diffuse(x0, t, eps, schedule)?;
    let pred = predict(&x_t, t)?;
    eps.values.same_shape(&pred, "wae_loss")?;
    let n = pred.data().len().max(1) as f64;
    Ok(eps
        .values
        .data()
        .iter()
        .zip(pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}
