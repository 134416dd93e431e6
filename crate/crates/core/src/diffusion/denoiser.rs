//! Noise-predicting denoiser: a two-level conv encoder, a mid-block with a
//! timestep embedding and cross-attention onto the reference feature, and a
//! decoder with a skip connection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionConfig, CrossAttention};
use super::VarianceSchedule;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::nn::{param_group, Bound, Conv2d, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channels of the feature being denoised.
    pub channels: usize,
    pub model_channels: usize,
    /// Channels of the reference feature.
    pub ref_channels: usize,
    pub heads: usize,
    /// 3 for the regular model; 1 gives a position-wise network.
    pub kernel: usize,
    /// Stride-2 second encoder level.
    pub downsample: bool,
    pub time_dim: usize,
    pub timesteps: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.model_channels == 0 || self.ref_channels == 0 || self.time_dim == 0 {
            return bad("denoiser widths must be positive".into());
        }
        if self.heads == 0 || self.model_channels % self.heads != 0 {
            return bad(format!(
                "{} heads do not divide model width {}",
                self.heads, self.model_channels
            ));
        }
        if self.kernel % 2 == 0 {
            return bad("denoiser kernel must be odd".into());
        }
        if self.timesteps == 0 {
            return bad("timesteps must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            key_dim: self.model_channels / self.heads,
        }
    }
}

/// Sinusoidal timestep table; row `t − 1` embeds timestep `t`.
pub fn sinusoidal_table(timesteps: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[timesteps, dim], |i| {
        let (t, j) = ((i / dim + 1) as f64, i % dim);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    group: String,
    conv_in: Conv2d,
    conv_mid: Conv2d,
    time: Linear,
    attn: CrossAttention,
    conv_up: Conv2d,
    conv_out: Conv2d,
    table: Tensor,
}

impl Denoiser {
    /// Registers parameters under `name.*`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, m, k) = (config.channels, config.model_channels, config.kernel);
        let stride = if config.downsample { 2 } else { 1 };
        let conv_in = Conv2d::new(store, &format!("{name}.conv_in"), c, m, k, 1, 1.0, rng);
        let conv_mid = Conv2d::new(store, &format!("{name}.conv_mid"), m, m, k, stride, 1.0, rng);
        let time = Linear::new(store, &format!("{name}.time"), config.time_dim, m, true, rng);
        let attn = CrossAttention::new(store, &format!("{name}.attn"), m, config.ref_channels, config.attention(), rng)?;
        let conv_up = Conv2d::new(store, &format!("{name}.conv_up"), 2 * m, m, k, 1, 1.0, rng);
        let conv_out = Conv2d::new(store, &format!("{name}.conv_out"), m, c, 1, 1, 0.5, rng);
        let table = sinusoidal_table(config.timesteps, config.time_dim);
        Ok(Self {
            group: param_group(name).to_string(),
            config,
            conv_in,
            conv_mid,
            time,
            attn,
            conv_up,
            conv_out,
            table,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn attention(&self) -> &CrossAttention {
        &self.attn
    }

    /// Rejects parameters that are missing or non-finite, or a schedule
    /// whose length differs from the trained timestep count.
    pub fn check_ready(&self, params: &ParamStore, schedule: &VarianceSchedule) -> Result<()> {
        if params.group_numel(&self.group) == 0 {
            return Err(Error::InvalidArgument("denoiser parameters missing".into()));
        }
        if !params.all_finite() {
            return Err(Error::InvalidArgument("non-finite parameters".into()));
        }
        if schedule.len() != self.config.timesteps {
            return Err(Error::InvalidArgument(format!(
                "denoiser trained for T = {}, schedule has {}",
                self.config.timesteps,
                schedule.len()
            )));
        }
        Ok(())
    }

    /// ε_θ(x_t, t, x^r) for `x_t` of shape `h × w × channels`.
    pub fn predict<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, t: usize, reference: Var<'t>) -> Result<Var<'t>> {
        if t == 0 || t > self.config.timesteps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.config.timesteps
            )));
        }
        let xs = x_t.shape();
        if xs.len() != 3 || xs[2] != self.config.channels {
            return Err(Error::shape("denoiser input", &[0, 0, self.config.channels], &xs));
        }
        let rs = reference.shape();
        if rs.len() != 3 || rs[2] != self.config.ref_channels {
            return Err(Error::shape("denoiser reference", &[0, 0, self.config.ref_channels], &rs));
        }
        let m = self.config.model_channels;
        let tape = x_t.tape();
        let h1 = self.conv_in.forward(p, x_t)?.relu();
        let h2 = self.conv_mid.forward(p, h1)?.relu();
        let e = self.config.time_dim;
        let row = Tensor::new(vec![1, e], self.table.row(t - 1, e).to_vec())?;
        let temb = self.time.forward(p, tape.constant(row))?.reshape(&[m])?;
        let h2 = h2.add_row(temb)?;
        let h2 = h2.add(self.attn.forward(p, h2, reference)?)?;
        let hs = h1.shape();
        let up = h2.upsample_nearest(hs[0], hs[1])?;
        let h3 = self.conv_up.forward(p, Var::concat_last(&[up, h1])?)?.relu();
        self.conv_out.forward(p, h3)
    }

    /// Forward pass on plain values with frozen parameters.
    pub fn predict_values(&self, params: &ParamStore, x_t: &FeatureMap, t: usize, reference: &FeatureMap) -> Result<FeatureMap> {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let out = self.predict(
            &p,
            tape.constant(x_t.tensor().clone()),
            t,
            tape.constant(reference.tensor().clone()),
        )?;
        FeatureMap::from_tensor((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffusion::{fog_residual_var, make_schedule, reverse_enhance, wae_loss_var};
    use crate::gradcheck::{check_gradients, GradCheckOptions};

    fn config(kernel: usize, downsample: bool) -> DenoiserConfig {
        DenoiserConfig {
            channels: 4,
            model_channels: 8,
            ref_channels: 3,
            heads: 4,
            kernel,
            downsample,
            time_dim: 6,
            timesteps: 15,
        }
    }

    fn map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::from_tensor(Tensor::randn(&[h, w, c], rng)).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = Denoiser::new(&mut store, "denoiser", config(3, true), &mut rng).unwrap();
        for (h, w) in [(1, 1), (2, 2), (3, 5), (8, 24)] {
            let x = map(h, w, 4, &mut rng);
            let r = map(2, 3, 3, &mut rng);
            let y = d.predict_values(&store, &x, 7, &r).unwrap();
            assert_eq!(y.dims(), (h, w, 4));
        }
        let x = map(2, 2, 4, &mut rng);
        assert!(d.predict_values(&store, &x, 0, &map(1, 1, 3, &mut rng)).is_err());
        assert!(d.predict_values(&store, &x, 16, &map(1, 1, 3, &mut rng)).is_err());
        assert!(d.predict_values(&store, &map(2, 2, 5, &mut rng), 1, &map(1, 1, 3, &mut rng)).is_err());
    }

    #[test]
    fn reference_changes_the_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = Denoiser::new(&mut store, "denoiser", config(3, true), &mut rng).unwrap();
        let x = map(4, 4, 4, &mut rng);
        let a = d.predict_values(&store, &x, 3, &map(4, 4, 3, &mut rng)).unwrap();
        let b = d.predict_values(&store, &x, 3, &map(4, 4, 3, &mut rng)).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) > 1e-6);
    }

    #[test]
    fn wae_gradients_match_finite_differences_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let d = Denoiser::new(&mut store, "denoiser", config(3, true), &mut rng).unwrap();
        let schedule = make_schedule(15, 1e-4, 0.05).unwrap();
        let x0 = Tensor::randn(&[2, 2, 4], &mut rng);
        let xf = Tensor::randn(&[2, 2, 4], &mut rng);
        let r = Tensor::randn(&[2, 2, 3], &mut rng);
        let mut inputs = store.tensors();
        let n = inputs.len();
        inputs.extend([x0, xf, r]);
        let report = check_gradients(
            &inputs,
            |_, v| {
                let p = Bound::from_vars(v[..n].to_vec());
                let (eps, _, _) = fog_residual_var(v[n], v[n + 1])?;
                wae_loss_var(&p, &d, v[n], 6, eps, v[n + 2], &schedule)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        for (i, e) in report.relative_errors.iter().enumerate() {
            let name = if i < n { store.name(crate::nn::ParamId(i)) } else { "input" };
            assert!(*e < 1e-3, "{name}: {e}");
            assert!(report.analytic[i].norm() > 0.0, "{name} got no gradient");
        }
    }

    #[test]
    fn reverse_enhance_is_finite_and_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let d = Denoiser::new(&mut store, "denoiser", config(3, true), &mut rng).unwrap();
        let s = make_schedule(15, 1e-4, 0.05).unwrap();
        let x = map(8, 24, 4, &mut rng);
        let r = map(8, 24, 3, &mut rng);
        let y = reverse_enhance(&x, &r, &d, &store, &s).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(y.tensor().is_finite());
        assert_eq!(y, reverse_enhance(&x, &r, &d, &store, &s).unwrap());
        assert!(reverse_enhance(&x, &r, &d, &store, &make_schedule(10, 1e-4, 0.05).unwrap()).is_err());
        store.get_mut(crate::nn::ParamId(0)).data_mut()[0] = f64::NAN;
        assert!(reverse_enhance(&x, &r, &d, &store, &s).is_err());
        assert!(reverse_enhance(&x, &r, &d, &ParamStore::new(), &s).is_err());
    }

    #[test]
    fn sinusoidal_rows_are_distinct() {
        let t = sinusoidal_table(15, 8);
        assert_eq!(t.data()[0], 1f64.sin());
        assert_eq!(t.data()[1], 1f64.cos());
        for a in 0..15 {
            for b in a + 1..15 {
                let d: f64 = t.row(a, 8).iter().zip(t.row(b, 8)).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-3);
            }
        }
    }
}
