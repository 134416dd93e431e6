use rand::Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{decode_box, encode_box, iou_2d, AnchorConfig, AnchorGrid, DEPTH_COL, REG_DIM};
use super::{nms, Detection};
use crate::autograd::{Penalty, Tape, Var};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::scene::{CalibMatrix, ObjectClass, SceneAnnotation};
use crate::tensor::Tensor;

/// Outputs per anchor: one logit plus the regression block.
pub const OUT_DIM: usize = 1 + REG_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub anchors: AnchorConfig,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    /// Initial foreground probability encoded in the logit bias.
    pub prior_prob: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            anchors: AnchorConfig::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
            positive_iou: 0.5,
            negative_iou: 0.4,
            prior_prob: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Highest-scoring candidates kept before suppression.
    pub max_candidates: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_candidates: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub labels: Vec<AnchorLabel>,
    /// Ground-truth index of each positive anchor.
    pub matched: Vec<Option<usize>>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Positive).count()
    }
}

/// Max-IoU assignment: positive at IoU ≥ `pos`, negative below `neg`,
/// ignored in between. Each car's best anchor is also positive. Anchors
/// overlapping an ignore-class box at ≥ `pos` are ignored.
pub fn assign_anchors(grid: &AnchorGrid, annotations: &[SceneAnnotation], pos: f64, neg: f64) -> Assignment {
    let n = grid.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched = vec![None; n];
    let mut best_iou = vec![0.0; n];
    let cars: Vec<usize> = (0..annotations.len())
        .filter(|&i| annotations[i].class == ObjectClass::Car)
        .collect();
    for (i, a) in grid.anchors.iter().enumerate() {
        let ab = a.bbox();
        for &g in &cars {
            let iou = iou_2d(&ab, &annotations[g].bbox2d);
            if iou > best_iou[i] {
                best_iou[i] = iou;
                matched[i] = Some(g);
            }
        }
        labels[i] = if best_iou[i] >= pos {
            AnchorLabel::Positive
        } else if best_iou[i] >= neg {
            AnchorLabel::Ignore
        } else {
            AnchorLabel::Negative
        };
        if labels[i] == AnchorLabel::Negative
            && annotations
                .iter()
                .any(|g| g.class == ObjectClass::Ignore && iou_2d(&ab, &g.bbox2d) >= pos)
        {
            labels[i] = AnchorLabel::Ignore;
        }
    }
    for &g in &cars {
        let mut best = None;
        let mut best_v = 0.0;
        for (i, a) in grid.anchors.iter().enumerate() {
            let iou = iou_2d(&a.bbox(), &annotations[g].bbox2d);
            if iou > best_v {
                best_v = iou;
                best = Some(i);
            }
        }
        if let Some(i) = best {
            labels[i] = AnchorLabel::Positive;
            matched[i] = Some(g);
        }
    }
    for i in 0..n {
        if labels[i] != AnchorLabel::Positive {
            matched[i] = None;
        }
    }
    Assignment { labels, matched }
}

/// Detection loss terms, each already divided by `max(1, positives)`.
pub struct OdTerms<'t> {
    pub total: Var<'t>,
    pub classification: Var<'t>,
    pub regression: Var<'t>,
    pub depth: Var<'t>,
    pub num_positive: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OdBreakdown {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    pub depth: f64,
    pub num_positive: usize,
}

impl OdTerms<'_> {
    pub fn breakdown(&self) -> OdBreakdown {
        OdBreakdown {
            total: self.total.item(),
            classification: self.classification.item(),
            regression: self.regression.item(),
            depth: self.depth.item(),
            num_positive: self.num_positive,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    conv: Conv2d,
    out: Conv2d,
    config: HeadConfig,
    stride: f64,
}

impl DetectionHead {
    /// `stride` is the feature-to-image scale of the maps this head reads.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        stride: f64,
        config: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.anchors.validate()?;
        if !(config.prior_prob > 0.0 && config.prior_prob < 1.0) || config.hidden == 0 {
            return Err(Error::Config("head needs hidden ≥ 1 and prior in (0, 1)".into()));
        }
        let a = config.anchors.per_cell();
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_channels, config.hidden, 3, 1, 1.0, rng);
        let out = Conv2d::new(store, &format!("{name}.out"), config.hidden, a * OUT_DIM, 1, 1, 0.1, rng);
        let bias = -((1.0 - config.prior_prob) / config.prior_prob).ln();
        let b = store.get_mut(out.bias);
        for k in 0..a {
            b.data_mut()[k * OUT_DIM] = bias;
        }
        Ok(Self {
            conv,
            out,
            config,
            stride,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn anchor_grid(&self, feat_h: usize, feat_w: usize, calib: &CalibMatrix) -> Result<AnchorGrid> {
        AnchorGrid::new(feat_h, feat_w, self.stride, calib, &self.config.anchors)
    }

    /// Raw outputs, one row of [`OUT_DIM`] values per anchor.
    pub fn forward<'t>(&self, p: &Bound<'t>, feature: Var<'t>) -> Result<Var<'t>> {
        let s = feature.shape();
        if s.len() != 3 {
            return Err(Error::shape("head input", &[0, 0, 0], &s));
        }
        let h = self.conv.forward(p, feature)?.relu();
        let y = self.out.forward(p, h)?;
        y.reshape(&[s[0] * s[1] * self.config.anchors.per_cell(), OUT_DIM])
    }

    /// Focal classification, smooth-L1 box/dimension/orientation regression
    /// and L1 log-depth regression, each normalized by the positive count.
    pub fn od_loss_var<'t>(
        &self,
        predictions: Var<'t>,
        grid: &AnchorGrid,
        annotations: &[SceneAnnotation],
        calib: &CalibMatrix,
    ) -> Result<OdTerms<'t>> {
        let n = grid.len();
        if predictions.shape() != [n, OUT_DIM] {
            return Err(Error::shape("od_loss", &[n, OUT_DIM], &predictions.shape()));
        }
        let cfg = &self.config;
        let asg = assign_anchors(grid, annotations, cfg.positive_iou, cfg.negative_iou);
        let mut cls_t = vec![0.0; n];
        let mut cls_w = vec![0.0; n];
        let mut reg_t = vec![0.0; n * REG_DIM];
        let mut reg_m = vec![0.0; n * REG_DIM];
        let mut dep_m = vec![0.0; n * REG_DIM];
        for i in 0..n {
            match asg.labels[i] {
                AnchorLabel::Ignore => {}
                AnchorLabel::Negative => cls_w[i] = 1.0,
                AnchorLabel::Positive => {
                    cls_w[i] = 1.0;
                    cls_t[i] = 1.0;
                    let g = asg.matched[i].expect("positive anchors are matched");
                    let t = encode_box(&grid.anchors[i], &annotations[g], calib, cfg.anchors.mean_dims)?;
                    reg_t[i * REG_DIM..(i + 1) * REG_DIM].copy_from_slice(&t);
                    for k in 0..REG_DIM {
                        if k == DEPTH_COL {
                            dep_m[i * REG_DIM + k] = 1.0;
                        } else {
                            reg_m[i * REG_DIM + k] = 1.0;
                        }
                    }
                }
            }
        }
        let num_positive = asg.num_positive();
        let norm = 1.0 / num_positive.max(1) as f64;
        let logits = predictions.slice_cols(0, 1)?;
        let reg = predictions.slice_cols(1, OUT_DIM)?;
        let classification = logits
            .sigmoid_focal_loss(&cls_t, &cls_w, cfg.focal_alpha, cfg.focal_gamma)?
            .scale(norm);
        let regression = reg
            .masked_penalty(&reg_t, &reg_m, Penalty::SmoothL1 { beta: cfg.smooth_l1_beta })?
            .scale(norm);
        let depth = reg.masked_penalty(&reg_t, &dep_m, Penalty::L1)?.scale(norm);
        let total = classification.add(regression)?.add(depth)?;
        Ok(OdTerms {
            total,
            classification,
            regression,
            depth,
            num_positive,
        })
    }

    /// Loss of plain head outputs against one scene's annotations.
    pub fn od_loss(&self, predictions: &Tensor, grid: &AnchorGrid, annotations: &[SceneAnnotation], calib: &CalibMatrix) -> Result<OdBreakdown> {
        let tape = Tape::new();
        let terms = self.od_loss_var(tape.constant(predictions.clone()), grid, annotations, calib)?;
        Ok(terms.breakdown())
    }

    /// Runs the head on `feature` and decodes detections.
    pub fn detect(
        &self,
        params: &ParamStore,
        feature: &FeatureMap,
        calib: Option<&CalibMatrix>,
        opts: &DetectOptions,
    ) -> Result<Vec<Detection>> {
        let calib = calib.ok_or(Error::MissingCalibration)?;
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let raw = self.forward(&p, tape.constant(feature.tensor().clone()))?;
        let grid = self.anchor_grid(feature.height(), feature.width(), calib)?;
        decode_detections(&raw.value(), &grid, Some(calib), opts)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scores, thresholds, decodes and suppresses raw head outputs.
pub fn decode_detections(
    raw: &Tensor,
    grid: &AnchorGrid,
    calib: Option<&CalibMatrix>,
    opts: &DetectOptions,
) -> Result<Vec<Detection>> {
    let calib = calib.ok_or(Error::MissingCalibration)?;
    if raw.shape() != [grid.len(), OUT_DIM] {
        return Err(Error::shape("decode_detections", &[grid.len(), OUT_DIM], raw.shape()));
    }
    let mut cand: Vec<(f64, usize)> = (0..grid.len())
        .map(|i| (sigmoid(raw.data()[i * OUT_DIM]), i))
        .filter(|(s, _)| *s >= opts.score_threshold)
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cand.truncate(opts.max_candidates);
    let dets: Vec<Detection> = cand
        .iter()
        .map(|&(score, i)| {
            let r = &raw.data()[i * OUT_DIM + 1..(i + 1) * OUT_DIM];
            let d = decode_box(&grid.anchors[i], r, calib, grid.config.mean_dims);
            Detection {
                score,
                bbox2d: d.bbox2d,
                location: d.location,
                dimensions: d.dimensions,
                yaw: d.yaw,
                alpha: d.alpha,
            }
        })
        .collect();
    let boxes: Vec<[f64; 4]> = dets.iter().map(|d| d.bbox2d).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let keep = nms(&boxes, &scores, opts.nms_iou);
    Ok(keep.into_iter().map(|i| dets[i].clone()).collect())
}
