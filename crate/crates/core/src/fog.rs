//! Homogeneous fog from depth: `I_F = I·T + I_A·(1 − T)` with
//! transmittance `T = exp(−δ·d)`.

use crate::error::{Error, Result};
use crate::scene::{ColorImage, DepthMap, FogPair, Scene};

/// Densities emitted as separate dataset variants.
pub const STANDARD_DENSITIES: [f64; 4] = [0.05, 0.1, 0.15, 0.3];
pub const DEFAULT_DENSITY: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AtmosphericLight {
    Explicit([f64; 3]),
    /// Estimated from the clear image.
    Estimate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FogParams {
    pub density: f64,
    pub atmospheric_light: AtmosphericLight,
}

impl FogParams {
    pub fn new(density: f64, atmospheric_light: AtmosphericLight) -> Result<Self> {
        let p = Self {
            density,
            atmospheric_light,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn estimated(density: f64) -> Result<Self> {
        Self::new(density, AtmosphericLight::Estimate)
    }

    fn validate(&self) -> Result<()> {
        if !(self.density >= 0.0) || !self.density.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "fog density must be finite and ≥ 0, got {}",
                self.density
            )));
        }
        if let AtmosphericLight::Explicit(a) = self.atmospheric_light {
            if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(
                    "atmospheric light components must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

fn transmittance_at(depth: f64, density: f64) -> f64 {
    if density == 0.0 {
        1.0
    } else {
        (-density * depth).exp()
    }
}

/// Per-pixel transmittance, row-major like `depth`.
pub fn transmittance(depth: &DepthMap, density: f64) -> Result<Vec<f64>> {
    if !(density >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fog density must be ≥ 0, got {density}"
        )));
    }
    Ok(depth
        .values
        .iter()
        .map(|&d| transmittance_at(d, density))
        .collect())
}

/// Mean color of the brightest 0.1% of pixels ranked by dark channel
/// (per-pixel channel minimum); ties resolve to the lower pixel index.
pub fn estimate_atmospheric_light(image: &ColorImage) -> [f64; 3] {
    let n = image.height * image.width;
    if n == 0 {
        return [1.0; 3];
    }
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let p = &image.data[i * 3..i * 3 + 3];
            (p[0].min(p[1]).min(p[2]), i)
        })
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let take = ((n as f64) * 0.001).ceil().max(1.0) as usize;
    let mut acc = [0.0; 3];
    for &(_, i) in order.iter().take(take) {
        for c in 0..3 {
            acc[c] += image.data[i * 3 + c];
        }
    }
    acc.map(|v| (v / take as f64).clamp(0.0, 1.0))
}

pub fn apply_fog(clear: &ColorImage, depth: &DepthMap, params: &FogParams) -> Result<ColorImage> {
    params.validate()?;
    if clear.height != depth.height || clear.width != depth.width {
        return Err(Error::shape(
            "apply_fog",
            &[clear.height, clear.width],
            &[depth.height, depth.width],
        ));
    }
    let light = match params.atmospheric_light {
        AtmosphericLight::Explicit(a) => a,
        AtmosphericLight::Estimate => estimate_atmospheric_light(clear),
    };
    let t = transmittance(depth, params.density)?;
    let mut data = Vec::with_capacity(clear.data.len());
    for (i, &ti) in t.iter().enumerate() {
        for c in 0..3 {
            let v = clear.data[i * 3 + c] * ti + light[c] * (1.0 - ti);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    ColorImage::new(clear.height, clear.width, data)
}

/// Adds fog to a generated scene.
pub fn fog_scene(scene: &Scene, params: &FogParams) -> Result<FogPair> {
    let foggy = apply_fog(&scene.image, &scene.depth, params)?;
    Ok(FogPair {
        seed: scene.seed,
        clear_image: scene.image.clone(),
        foggy_image: foggy,
        depth: scene.depth.clone(),
        annotations: scene.annotations.clone(),
        calib: scene.calib.clone(),
        density: params.density,
    })
}
