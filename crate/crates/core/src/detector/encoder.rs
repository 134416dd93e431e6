use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::scene::ColorImage;
use crate::tensor::Tensor;

/// Stack of 3×3 stride-2 convolutions, ReLU between levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    /// Standardize each input image per color channel.
    pub normalize_input: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32],
            normalize_input: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<Conv2d>,
    normalize_input: bool,
}

/// Smallest channel deviation used when standardizing an image.
const STD_FLOOR: f64 = 1e-3;

/// Zero-mean, unit-deviation copy of an `h × w × c` image, per channel.
pub fn standardize_channels(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    let n = (h * w).max(1) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0f64; c];
    for px in image.data().chunks_exact(c) {
        for k in 0..c {
            mean[k] += px[k] / n;
        }
    }
    for px in image.data().chunks_exact(c) {
        for k in 0..c {
            sq[k] += (px[k] - mean[k]).powi(2) / n;
        }
    }
    let std: Vec<f64> = sq.iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = (px[k] - mean[k]) / std[k];
        }
    }
    Ok(out)
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Config("encoder widths must be nonempty and positive".into()));
        }
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), c_in, c, 3, 2, 1.0, rng));
            c_in = c;
        }
        Ok(Self {
            convs,
            normalize_input: config.normalize_input,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }

    pub fn stride(&self) -> usize {
        1 << self.convs.len()
    }

    /// Feature size for an `h × w` image.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.convs
            .iter()
            .fold((h, w), |(h, w), c| c.geom.output_size(h, w))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("encoder input", &[0, 0, 3], &s));
        }
        // Images are data, so the standardization is not differentiated.
        let mut x = if self.normalize_input {
            image.tape().constant(standardize_channels(&image.value())?)
        } else {
            image
        };
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(p, x)?;
            if i + 1 < self.convs.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }

    pub fn encode(&self, params: &ParamStore, image: &ColorImage) -> Result<FeatureMap> {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let out = self.forward(&p, tape.constant(image.to_tensor()))?;
        FeatureMap::from_tensor((*out.value()).clone())
    }
}
