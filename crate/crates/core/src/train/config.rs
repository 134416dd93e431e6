use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{DetectOptions, EncoderConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::scene::{Difficulty, SceneConfig};

/// λ₁ weights the recalling loss, λ₂ the enhancement loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_codebook: bool,
    pub use_wad: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub train_first_seed: u64,
    pub val_first_seed: u64,
    /// Fog density of the training and evaluation pairs.
    pub density: f64,
    /// Densities written by `synth`.
    pub densities: Vec<f64>,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 256,
            val_scenes: 64,
            train_first_seed: 0,
            val_first_seed: 1_000_000,
            density: crate::fog::DEFAULT_DENSITY,
            densities: crate::fog::STANDARD_DENSITIES.to_vec(),
            scene: SceneConfig::default(),
        }
    }
}

/// Widths of every stage. Full-size values: 4096 slots of dimension 256,
/// 256 model channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub codebook_slots: usize,
    pub slot_dim: usize,
    pub model_channels: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub denoiser_kernel: usize,
    pub denoiser_downsample: bool,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            codebook_slots: 64,
            slot_dim: 32,
            model_channels: 16,
            heads: 4,
            time_dim: 16,
            denoiser_kernel: 3,
            denoiser_downsample: true,
            head: HeadConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 15,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

/// Full-size training used 120 epochs at rate 1e-4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Epochs between held-out evaluations; 0 disables them.
    pub eval_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 4,
            weights: LossWeights::default(),
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Seed of the per-scene weather coin.
    pub mixture_seed: u64,
    pub clear_fractions: Vec<f64>,
    /// Metric and difficulty summarized in ablation tables.
    pub metric: Metric,
    pub difficulty: Difficulty,
    pub detect: DetectOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            mixture_seed: 0,
            clear_fractions: crate::eval::standard_fractions(),
            metric: Metric::Bev,
            difficulty: Difficulty::Moderate,
            detect: DetectOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub diffusion: DiffusionConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "wxdet".into(),
            seed: 0,
            ablation: AblationFlags {
                use_codebook: true,
                use_wad: true,
            },
            diffusion: DiffusionConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ablation.use_codebook && !self.ablation.use_wad {
            return bad("use_codebook requires use_wad".into());
        }
        let d = &self.diffusion;
        if d.timesteps == 0 {
            return bad("diffusion needs at least one timestep".into());
        }
        if !(d.beta_start > 0.0 && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return bad(format!("need 0 < beta_start ≤ beta_end < 1, got {} and {}", d.beta_start, d.beta_end));
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad("learning rate must be positive".into());
        }
        if o.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        o.weights.validate()?;
        let m = &self.model;
        if m.codebook_slots == 0 || m.slot_dim == 0 {
            return bad("codebook needs K ≥ 1 and c ≥ 1".into());
        }
        if m.heads == 0 || m.model_channels % m.heads != 0 {
            return bad(format!("{} heads do not divide {} model channels", m.heads, m.model_channels));
        }
        if m.time_dim == 0 || m.denoiser_kernel % 2 == 0 {
            return bad("time_dim must be positive and the denoiser kernel odd".into());
        }
        if m.encoder.widths.is_empty() || m.encoder.widths.contains(&0) {
            return bad("encoder widths must be nonempty and positive".into());
        }
        m.head.anchors.validate()?;
        let e = &self.eval;
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return bad("IoU threshold must lie in (0, 1]".into());
        }
        if e.clear_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("clear fractions must lie in [0, 1]".into());
        }
        if self.data.density < 0.0 || self.data.densities.iter().any(|d| *d < 0.0) {
            return bad("fog densities must be nonnegative".into());
        }
        if self.data.train_scenes == 0 {
            return bad("need at least one training scene".into());
        }
        self.data.scene.validate()
    }
}
