use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LossWeights};
use crate::autograd::{Tape, Var};
use crate::codebook::{ckr_loss_var, nearest_slots, quantize_with_gradient, FrozenIndices, slot_histogram, CkrTerms, WeatherCodebook, WigReduction};
use crate::detector::{Detection, DetectionHead, Encoder, OdBreakdown, OdTerms};
use crate::diffusion::{
    fog_residual_var, make_schedule, reverse_enhance_var, wae_loss_var, Denoiser, DenoiserConfig, VarianceSchedule,
};
use crate::error::{Error, Result};
use crate::eval::DetectorModel;
use crate::feature::FeatureMap;
use crate::nn::{Bound, Conv2d, ParamId, ParamStore};
use crate::scene::{CalibMatrix, ColorImage, FogPair, SceneAnnotation};
use crate::tensor::Tensor;

pub const ENCODER_GROUP: &str = "encoder";
pub const CODEBOOK_GROUP: &str = "codebook";
pub const DENOISER_GROUP: &str = "denoiser";
pub const HEAD_GROUP: &str = "head";

/// Pre-quantization projection and the slot table.
#[derive(Clone, Debug)]
pub struct CodebookStage {
    pub proj: Conv2d,
    pub slots: ParamId,
}

#[derive(Clone, Debug)]
pub struct DiffusionStage {
    pub denoiser: Denoiser,
    pub schedule: VarianceSchedule,
}

/// One training example. `foggy` is required whenever a codebook or
/// diffusion stage is present.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub clear: ColorImage,
    pub foggy: Option<ColorImage>,
    pub annotations: Vec<SceneAnnotation>,
    pub calib: CalibMatrix,
}

impl From<&FogPair> for TrainSample {
    fn from(p: &FogPair) -> Self {
        Self {
            clear: p.clear_image.clone(),
            foggy: Some(p.foggy_image.clone()),
            annotations: p.annotations.clone(),
            calib: p.calib.clone(),
        }
    }
}

/// Loss terms of one sample or a batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub od: f64,
    pub classification: f64,
    pub regression: f64,
    pub depth: f64,
    pub ckr: f64,
    pub cke: f64,
    pub wig: f64,
    pub wae: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown, k: f64) {
        self.total += k * o.total;
        self.od += k * o.od;
        self.classification += k * o.classification;
        self.regression += k * o.regression;
        self.depth += k * o.depth;
        self.ckr += k * o.ckr;
        self.cke += k * o.cke;
        self.wig += k * o.wig;
        self.wae += k * o.wae;
    }
}

pub struct SampleTerms<'t> {
    pub total: Var<'t>,
    pub od: OdTerms<'t>,
    pub ckr: Option<CkrTerms<'t>>,
    pub wae: Option<Var<'t>>,
}

impl SampleTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        let OdBreakdown {
            total: od,
            classification,
            regression,
            depth,
            ..
        } = self.od.breakdown();
        LossBreakdown {
            total: self.total.item(),
            od,
            classification,
            regression,
            depth,
            ckr: self.ckr.as_ref().map_or(0.0, |c| c.total.item()),
            cke: self.ckr.as_ref().map_or(0.0, |c| c.cke.item()),
            wig: self.ckr.as_ref().map_or(0.0, |c| c.wig.item()),
            wae: self.wae.map_or(0.0, |w| w.item()),
        }
    }
}

/// Encoder, optional codebook and diffusion stages, and detection head,
/// all sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: ParamStore,
    pub encoder: Encoder,
    pub codebook: Option<CodebookStage>,
    pub diffusion: Option<DiffusionStage>,
    pub head: DetectionHead,
    pub detect_options: crate::detector::DetectOptions,
}

impl Model {
    /// Builds and initializes every stage enabled by the config's flags,
    /// drawing weights from a ChaCha8 stream seeded with `config.seed`.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = &config.model;
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, ENCODER_GROUP, &m.encoder, &mut rng)?;
        let c = encoder.out_channels();
        let codebook = if config.ablation.use_codebook {
            let proj = Conv2d::new(&mut params, &format!("{CODEBOOK_GROUP}.proj"), c, m.slot_dim, 1, 1, 1.0, &mut rng);
            let init = WeatherCodebook::random(m.codebook_slots, m.slot_dim, &mut rng)?;
            let slots = params.add(format!("{CODEBOOK_GROUP}.slots"), init.slots().clone());
            Some(CodebookStage { proj, slots })
        } else {
            None
        };
        let diffusion = if config.ablation.use_wad {
            let d = &config.diffusion;
            let dcfg = DenoiserConfig {
                channels: c,
                model_channels: m.model_channels,
                ref_channels: if codebook.is_some() { m.slot_dim } else { c },
                heads: m.heads,
                kernel: m.denoiser_kernel,
                downsample: m.denoiser_downsample,
                time_dim: m.time_dim,
                timesteps: d.timesteps,
            };
            Some(DiffusionStage {
                denoiser: Denoiser::new(&mut params, DENOISER_GROUP, dcfg, &mut rng)?,
                schedule: make_schedule(d.timesteps, d.beta_start, d.beta_end)?,
            })
        } else {
            None
        };
        let head = DetectionHead::new(&mut params, HEAD_GROUP, c, encoder.stride() as f64, m.head.clone(), &mut rng)?;
        Ok(Self {
            params,
            encoder,
            codebook,
            diffusion,
            head,
            detect_options: config.eval.detect,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn codebook(&self) -> Option<WeatherCodebook> {
        let cb = self.codebook.as_ref()?;
        WeatherCodebook::from_tensor(self.params.get(cb.slots).clone()).ok()
    }

    pub fn schedule(&self) -> Option<&VarianceSchedule> {
        self.diffusion.as_ref().map(|d| &d.schedule)
    }

    /// Weather-reference feature of an encoder feature: the quantized
    /// projection with a codebook, the feature itself without one. Returns
    /// the slot indices when quantizing.
    pub fn reference_var<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Vec<usize>)> {
        match &self.codebook {
            Some(cb) => quantize_with_gradient(cb.proj.forward(p, x)?, p.get(cb.slots)),
            None => Ok((x, Vec::new())),
        }
    }

    /// Feature handed to the head: the reverse-enhanced feature when a
    /// diffusion stage exists, the encoder output otherwise.
    pub fn enhance_var<'t>(&self, p: &Bound<'t>, x: Var<'t>, reference: Var<'t>) -> Result<Var<'t>> {
        match &self.diffusion {
            Some(d) => reverse_enhance_var(p, &d.denoiser, x, reference, &d.schedule),
            None => Ok(x),
        }
    }

    /// Total loss of one sample, `L_OD + λ₁·L_ckr + λ₂·L_wae`. `t` is the
    /// diffusion timestep used by the enhancement loss.
    pub fn sample_loss<'t>(
        &self,
        p: &Bound<'t>,
        sample: &TrainSample,
        t: usize,
        weights: &LossWeights,
    ) -> Result<SampleTerms<'t>> {
        self.sample_loss_with(p, sample, t, weights, None)
    }

    /// Slot indices and pre-quantization projections of both branches at
    /// the current parameters, for [`Model::sample_loss_with`].
    pub fn frozen_indices(&self, sample: &TrainSample) -> Result<Option<FrozenIndices>> {
        let (Some(cb), Some(foggy)) = (&self.codebook, &sample.foggy) else {
            return Ok(None);
        };
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let slots = self.params.get(cb.slots);
        let branch = |img: &ColorImage| -> Result<(Vec<usize>, Tensor)> {
            let x = self.encoder.forward(&p, tape.constant(img.to_tensor()))?;
            let z = (*cb.proj.forward(&p, x)?.value()).clone();
            Ok((nearest_slots(&z, slots)?, z))
        };
        Ok(Some(FrozenIndices {
            clear: branch(&sample.clear)?,
            foggy: branch(foggy)?,
        }))
    }

    /// [`Model::sample_loss`] with optionally frozen quantization, which
    /// makes the loss smooth in every parameter for finite-difference
    /// probes.
    pub fn sample_loss_with<'t>(
        &self,
        p: &Bound<'t>,
        sample: &TrainSample,
        t: usize,
        weights: &LossWeights,
        frozen: Option<&FrozenIndices>,
    ) -> Result<SampleTerms<'t>> {
        let tape = p.vars().first().map(|v| v.tape()).ok_or_else(|| Error::InvalidArgument("no parameters bound".into()))?;
        let x_c = self.encoder.forward(p, tape.constant(sample.clear.to_tensor()))?;
        let x_f = if self.codebook.is_some() || self.diffusion.is_some() {
            let foggy = sample
                .foggy
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("codebook and diffusion stages need paired foggy images".into()))?;
            Some(self.encoder.forward(p, tape.constant(foggy.to_tensor()))?)
        } else {
            None
        };
        let mut ckr = None;
        let mut reference = x_c;
        if let (Some(cb), Some(x_f)) = (&self.codebook, x_f) {
            let terms = ckr_loss_var(
                cb.proj.forward(p, x_c)?,
                cb.proj.forward(p, x_f)?,
                p.get(cb.slots),
                WigReduction::Mean,
                frozen,
            )?;
            reference = terms.ref_clear;
            ckr = Some(terms);
        }
        let mut wae = None;
        let mut feature = x_c;
        if let (Some(d), Some(x_f)) = (&self.diffusion, x_f) {
            let (eps, _, _) = fog_residual_var(x_c, x_f)?;
            wae = Some(wae_loss_var(p, &d.denoiser, x_c, t, eps, reference, &d.schedule)?);
            feature = reverse_enhance_var(p, &d.denoiser, x_c, reference, &d.schedule)?;
        }
        let grid = self.head.anchor_grid(feature.shape()[0], feature.shape()[1], &sample.calib)?;
        let pred = self.head.forward(p, feature)?;
        let od = self.head.od_loss_var(pred, &grid, &sample.annotations, &sample.calib)?;
        let mut total = od.total;
        if let Some(c) = &ckr {
            total = total.add(c.total.scale(weights.lambda1))?;
        }
        if let Some(w) = wae {
            total = total.add(w.scale(weights.lambda2))?;
        }
        Ok(SampleTerms { total, od, ckr, wae })
    }

    /// Mean loss over a batch with the diffusion timestep of each sample.
    pub fn batch_loss<'t>(
        &self,
        p: &Bound<'t>,
        batch: &[&TrainSample],
        timesteps: &[usize],
        weights: &LossWeights,
    ) -> Result<(Var<'t>, LossBreakdown, Vec<usize>)> {
        if batch.is_empty() || batch.len() != timesteps.len() {
            return Err(Error::InvalidArgument("batch and timestep lists must be nonempty and equal".into()));
        }
        let k = 1.0 / batch.len() as f64;
        let mut total: Option<Var<'t>> = None;
        let mut br = LossBreakdown::default();
        let mut usage = vec![0; self.codebook.as_ref().map_or(0, |cb| self.params.get(cb.slots).shape()[0])];
        for (s, &t) in batch.iter().zip(timesteps) {
            let terms = self.sample_loss(p, s, t, weights)?;
            br.accumulate(&terms.breakdown(), k);
            if let Some(c) = &terms.ckr {
                let h = slot_histogram(usage.len(), &[&c.indices_clear, &c.indices_foggy]);
                usage.iter_mut().zip(h).for_each(|(u, v)| *u += v);
            }
            let scaled = terms.total.scale(k);
            total = Some(match total {
                None => scaled,
                Some(acc) => acc.add(scaled)?,
            });
        }
        Ok((total.expect("batch is nonempty"), br, usage))
    }

    /// Feature the head sees for `image` at inference.
    pub fn enhance(&self, image: &ColorImage) -> Result<FeatureMap> {
        if let Some(d) = &self.diffusion {
            d.denoiser.check_ready(&self.params, &d.schedule)?;
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let x = self.encoder.forward(&p, tape.constant(image.to_tensor()))?;
        let (reference, _) = self.reference_var(&p, x)?;
        let out = self.enhance_var(&p, x, reference)?;
        FeatureMap::from_tensor((*out.value()).clone())
    }

    /// Slot indices chosen for `image`, if the model has a codebook.
    pub fn slot_indices(&self, image: &ColorImage) -> Result<Option<Vec<usize>>> {
        if self.codebook.is_none() {
            return Ok(None);
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let x = self.encoder.forward(&p, tape.constant(image.to_tensor()))?;
        Ok(Some(self.reference_var(&p, x)?.1))
    }

    /// Gradient norm per parameter group.
    pub fn gradient_audit(&self, grads: &[Tensor]) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for ((_, param), g) in self.params.iter().zip(grads) {
            let group = crate::nn::param_group(&param.name).to_string();
            let n = g.norm();
            match out.iter_mut().find(|(name, _)| *name == group) {
                Some((_, v)) => *v = v.hypot(n),
                None => out.push((group, n)),
            }
        }
        out
    }
}

impl DetectorModel for Model {
    fn detect_image(&self, image: &ColorImage, calib: &CalibMatrix) -> Result<Vec<Detection>> {
        let feature = self.enhance(image)?;
        self.head.detect(&self.params, &feature, Some(calib), &self.detect_options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};
    use crate::fog::{fog_scene, FogParams};

    fn small_config(codebook: bool, wad: bool) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.ablation.use_codebook = codebook;
        cfg.ablation.use_wad = wad;
        cfg.diffusion.timesteps = 3;
        cfg.model.encoder.widths = vec![4, 8];
        cfg.model.codebook_slots = 8;
        cfg.model.slot_dim = 4;
        cfg.model.model_channels = 4;
        cfg.model.heads = 2;
        cfg.model.time_dim = 4;
        cfg.model.head.hidden = 4;
        cfg.data.scene = SceneConfig {
            height: 16,
            width: 32,
            focal: 30.0,
            horizon_row: 6.0,
            ..SceneConfig::default()
        };
        cfg
    }

    fn sample(cfg: &ExperimentConfig) -> TrainSample {
        let scene = generate_scene(3, &cfg.data.scene).unwrap();
        TrainSample::from(&fog_scene(&scene, &FogParams::estimated(0.1).unwrap()).unwrap())
    }

    #[test]
    fn ablation_isolation_by_parameter_groups() {
        let base = Model::new(&small_config(false, false)).unwrap();
        let wad = Model::new(&small_config(false, true)).unwrap();
        let full = Model::new(&small_config(true, true)).unwrap();
        assert_eq!(base.params.groups(), vec![ENCODER_GROUP, HEAD_GROUP]);
        assert_eq!(wad.params.groups(), vec![ENCODER_GROUP, DENOISER_GROUP, HEAD_GROUP]);
        assert_eq!(full.params.groups(), vec![ENCODER_GROUP, CODEBOOK_GROUP, DENOISER_GROUP, HEAD_GROUP]);
        assert_eq!(
            base.num_params(),
            base.params.group_numel(ENCODER_GROUP) + base.params.group_numel(HEAD_GROUP)
        );
    }

    #[test]
    fn loss_weights_combine_linearly() {
        let cfg = small_config(true, true);
        let model = Model::new(&cfg).unwrap();
        let s = sample(&cfg);
        let eval = |w: LossWeights| {
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            model.sample_loss(&p, &s, 2, &w).unwrap().breakdown()
        };
        let zero = eval(LossWeights { lambda1: 0.0, lambda2: 0.0 });
        assert_eq!(zero.total, zero.od);
        let one = eval(LossWeights::default());
        assert_eq!(one.total, one.od + one.ckr + one.wae);
        assert_eq!(one.ckr, one.cke + one.wig);
        let two = eval(LossWeights { lambda1: 2.0, lambda2: 1.0 });
        assert!((two.total - one.total - one.ckr).abs() < 1e-12);
    }

    #[test]
    fn unpaired_samples_are_rejected_with_fog_stages() {
        let cfg = small_config(false, true);
        let model = Model::new(&cfg).unwrap();
        let mut s = sample(&cfg);
        s.foggy = None;
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        assert!(model.sample_loss(&p, &s, 1, &LossWeights::default()).is_err());
        let base = Model::new(&small_config(false, false)).unwrap();
        let p = base.params.bind(&tape);
        assert!(base.sample_loss(&p, &s, 1, &LossWeights::default()).is_ok());
    }

    #[test]
    fn every_group_gets_gradient() {
        let cfg = small_config(true, true);
        let model = Model::new(&cfg).unwrap();
        let s = sample(&cfg);
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let terms = model.sample_loss(&p, &s, 2, &LossWeights::default()).unwrap();
        let grads = model.params.collect_grads(&p, &tape.backward(terms.total));
        for (group, norm) in model.gradient_audit(&grads) {
            assert!(norm > 0.0, "{group} has zero gradient");
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = small_config(true, true);
        let model = Model::new(&cfg).unwrap();
        let s = sample(&cfg);
        let a = model.enhance(&s.clear).unwrap();
        assert_eq!(a, model.enhance(&s.clear).unwrap());
        assert_eq!(a.dims(), (4, 8, 8));
        assert!(model.detect_image(&s.foggy.unwrap(), &s.calib).is_ok());
    }
}
