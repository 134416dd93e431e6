//! AP40 evaluation with rotated-box overlaps, and the mixed-weather protocol.

mod ap;
mod iou;

pub use ap::{ap40, ap40_from_scored, evaluate, match_frames, APResult, Ap40, Frame, Metric, Scored, RECALL_POSITIONS};
pub use iou::{bev_intersection, bev_iou, iou_3d, BevBox, Box3d};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::scene::{CalibMatrix, ColorImage, DifficultyThresholds, SceneAnnotation};

/// Anything that turns an image into detections.
pub trait DetectorModel {
    fn detect_image(&self, image: &ColorImage, calib: &CalibMatrix) -> Result<Vec<Detection>>;
}

/// One evaluation image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub image: ColorImage,
    pub annotations: Vec<SceneAnnotation>,
    pub calib: CalibMatrix,
}

/// Clear fractions swept by the robustness curve.
pub fn standard_fractions() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Per-scene weather choice: `true` picks the clear image. Scene `i` is
/// clear when the `i`-th uniform draw of a ChaCha8 stream seeded with
/// `seed` falls below `clear_fraction`.
pub fn weather_mask(n: usize, clear_fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&clear_fraction) {
        return Err(Error::InvalidArgument(format!(
            "clear fraction {clear_fraction} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.gen::<f64>() < clear_fraction).collect())
}

fn check_aligned(clear: &[EvalSample], foggy: &[EvalSample]) -> Result<()> {
    if clear.len() != foggy.len() {
        return Err(Error::InvalidArgument(format!(
            "clear and foggy sets differ in size ({} vs {})",
            clear.len(),
            foggy.len()
        )));
    }
    Ok(())
}

pub fn detect_all<M: DetectorModel + ?Sized>(model: &M, samples: &[EvalSample]) -> Result<Vec<Vec<Detection>>> {
    samples.iter().map(|s| model.detect_image(&s.image, &s.calib)).collect()
}

pub fn frames_of(samples: &[EvalSample], detections: Vec<Vec<Detection>>) -> Vec<Frame> {
    samples
        .iter()
        .zip(detections)
        .map(|(s, d)| Frame {
            detections: d,
            ground_truth: s.annotations.clone(),
        })
        .collect()
}

/// Evaluates on a seeded per-scene mixture of clear and foggy images.
#[allow(clippy::too_many_arguments)]
pub fn mixed_weather_eval<M: DetectorModel + ?Sized>(
    model: &M,
    clear: &[EvalSample],
    foggy: &[EvalSample],
    clear_fraction: f64,
    seed: u64,
    iou_threshold: f64,
    thresholds: &DifficultyThresholds,
) -> Result<APResult> {
    check_aligned(clear, foggy)?;
    let mask = weather_mask(clear.len(), clear_fraction, seed)?;
    let frames = mask
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = if c { &clear[i] } else { &foggy[i] };
            Ok(Frame {
                detections: model.detect_image(&s.image, &s.calib)?,
                ground_truth: s.annotations.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&frames, iou_threshold, thresholds)
}

/// Detections for both weathers, computed once and mixed per fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherDetections {
    pub clear: Vec<Frame>,
    pub foggy: Vec<Frame>,
}

impl WeatherDetections {
    pub fn compute<M: DetectorModel + ?Sized>(model: &M, clear: &[EvalSample], foggy: &[EvalSample]) -> Result<Self> {
        check_aligned(clear, foggy)?;
        Ok(Self {
            clear: frames_of(clear, detect_all(model, clear)?),
            foggy: frames_of(foggy, detect_all(model, foggy)?),
        })
    }

    pub fn mixture(&self, clear_fraction: f64, seed: u64) -> Result<Vec<Frame>> {
        let mask = weather_mask(self.clear.len(), clear_fraction, seed)?;
        Ok(mask
            .iter()
            .enumerate()
            .map(|(i, &c)| if c { self.clear[i].clone() } else { self.foggy[i].clone() })
            .collect())
    }

    pub fn evaluate_mixture(
        &self,
        clear_fraction: f64,
        seed: u64,
        iou_threshold: f64,
        thresholds: &DifficultyThresholds,
    ) -> Result<APResult> {
        evaluate(&self.mixture(clear_fraction, seed)?, iou_threshold, thresholds)
    }

    /// AP40 at every clear fraction in `fractions`.
    pub fn robustness_curve(
        &self,
        fractions: &[f64],
        seed: u64,
        iou_threshold: f64,
        thresholds: &DifficultyThresholds,
    ) -> Result<Vec<(f64, APResult)>> {
        fractions
            .iter()
            .map(|&f| Ok((f, self.evaluate_mixture(f, seed, iou_threshold, thresholds)?)))
            .collect()
    }
}

#[derive(serde::Serialize)]
struct ApRow<'a> {
    label: &'a str,
    clear_fraction: Option<f64>,
    metric: &'static str,
    difficulty: &'static str,
    threshold: f64,
    ap40: f64,
}

/// Writes `(label, clear fraction, result)` entries as
/// `label,clear_fraction,metric,difficulty,threshold,ap40` rows.
pub fn write_ap_csv(path: &Path, results: &[(String, Option<f64>, APResult)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (label, frac, r) in results {
        for (m, d, thr, ap) in r.rows() {
            w.serialize(ApRow {
                label,
                clear_fraction: *frac,
                metric: m.name(),
                difficulty: d.name(),
                threshold: thr,
                ap40: ap,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
