use serde::{Deserialize, Serialize};

use super::iou::{bev_iou, iou_3d, Box3d};
use crate::detector::Detection;
use crate::error::Result;
use crate::scene::{Difficulty, DifficultyThresholds, ObjectClass, SceneAnnotation};

/// Number of recall positions sampled.
pub const RECALL_POSITIONS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Bev,
    ThreeD,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::ThreeD, Metric::Bev];

    pub fn index(self) -> usize {
        match self {
            Metric::ThreeD => 0,
            Metric::Bev => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::ThreeD => "3d",
            Metric::Bev => "bev",
        }
    }

    pub fn overlap(self, det: &Detection, gt: &SceneAnnotation) -> Result<f64> {
        let a = Box3d::from_annotation(&det.to_annotation());
        let b = Box3d::from_annotation(gt);
        match self {
            Metric::ThreeD => iou_3d(&a, &b),
            Metric::Bev => bev_iou(&a.bev, &b.bev),
        }
    }
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<SceneAnnotation>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ap40 {
    pub ap: f64,
    pub num_gt: usize,
    /// Set when no ground truth was eligible; `ap` is then 0.
    pub no_ground_truth: bool,
}

/// Ranked outcome of one counted detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub true_positive: bool,
}

/// Greedy score-descending matching in every frame. Detections matched to
/// a ground-truth box outside `difficulty` (or to an ignore-class box), and
/// unmatched detections shorter than the difficulty's minimum height, are
/// left out.
pub fn match_frames(
    frames: &[Frame],
    metric: Metric,
    iou_threshold: f64,
    difficulty: Difficulty,
    thresholds: &DifficultyThresholds,
) -> Result<(Vec<Scored>, usize)> {
    let mut scored = Vec::new();
    let mut num_gt = 0;
    let min_h = thresholds.min_height[difficulty.index()];
    for f in frames {
        let valid: Vec<bool> = f.ground_truth.iter().map(|g| g.fits(difficulty, thresholds)).collect();
        num_gt += valid.iter().filter(|v| **v).count();
        let mut taken = vec![false; f.ground_truth.len()];
        let mut order: Vec<usize> = (0..f.detections.len()).collect();
        order.sort_by(|&a, &b| f.detections[b].score.total_cmp(&f.detections[a].score).then(a.cmp(&b)));
        for di in order {
            let det = &f.detections[di];
            let mut best: Option<(usize, f64)> = None;
            let mut best_ignored: Option<usize> = None;
            for (gi, gt) in f.ground_truth.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let iou = if gt.class == ObjectClass::Car {
                    metric.overlap(det, gt)?
                } else {
                    let a = det.bbox2d;
                    crate::detector::iou_2d(&a, &gt.bbox2d)
                };
                if iou < iou_threshold {
                    continue;
                }
                if valid[gi] {
                    if best.map_or(true, |(_, v)| iou > v) {
                        best = Some((gi, iou));
                    }
                } else if best_ignored.is_none() {
                    best_ignored = Some(gi);
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                scored.push(Scored {
                    score: det.score,
                    true_positive: true,
                });
            } else if let Some(gi) = best_ignored {
                taken[gi] = true;
            } else if det.bbox2d[3] - det.bbox2d[1] >= min_h {
                scored.push(Scored {
                    score: det.score,
                    true_positive: false,
                });
            }
        }
    }
    Ok((scored, num_gt))
}

/// AP from ranked outcomes: interpolated precision (best precision at any
/// recall ≥ r) averaged over r = 1/40, 2/40, …, 1.
pub fn ap40_from_scored(scored: &[Scored], num_gt: usize) -> Ap40 {
    if num_gt == 0 {
        return Ap40 {
            ap: 0.0,
            num_gt,
            no_ground_truth: true,
        };
    }
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut tp = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(s.len());
    for (rank, x) in s.iter().enumerate() {
        if x.true_positive {
            tp += 1;
        }
        pr.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for k in 1..=RECALL_POSITIONS {
        let r = k as f64 / RECALL_POSITIONS as f64;
        let p = pr
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += p;
    }
    Ap40 {
        ap: total / RECALL_POSITIONS as f64,
        num_gt,
        no_ground_truth: false,
    }
}

pub fn ap40(
    frames: &[Frame],
    metric: Metric,
    iou_threshold: f64,
    difficulty: Difficulty,
    thresholds: &DifficultyThresholds,
) -> Result<Ap40> {
    let (scored, num_gt) = match_frames(frames, metric, iou_threshold, difficulty, thresholds)?;
    Ok(ap40_from_scored(&scored, num_gt))
}

/// AP40 for both metrics and all three difficulties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    /// `values[metric.index()][difficulty.index()]`.
    pub values: [[f64; 3]; 2],
    pub iou_threshold: f64,
    pub no_ground_truth: [bool; 3],
}

impl APResult {
    pub fn get(&self, metric: Metric, difficulty: Difficulty) -> f64 {
        self.values[metric.index()][difficulty.index()]
    }

    /// `(metric, difficulty, threshold, ap40)` rows.
    pub fn rows(&self) -> Vec<(Metric, Difficulty, f64, f64)> {
        let mut out = Vec::new();
        for m in Metric::ALL {
            for d in Difficulty::ALL {
                out.push((m, d, self.iou_threshold, self.get(m, d)));
            }
        }
        out
    }
}

pub fn evaluate(frames: &[Frame], iou_threshold: f64, thresholds: &DifficultyThresholds) -> Result<APResult> {
    let mut values = [[0.0; 3]; 2];
    let mut no_gt = [false; 3];
    for m in Metric::ALL {
        for d in Difficulty::ALL {
            let r = ap40(frames, m, iou_threshold, d, thresholds)?;
            values[m.index()][d.index()] = r.ap;
            no_gt[d.index()] = r.no_ground_truth;
        }
    }
    Ok(APResult {
        values,
        iou_threshold,
        no_ground_truth: no_gt,
    })
}
