//! Toy backbone and anchor-based monocular 3D detection head.

mod anchors;
mod encoder;
mod head;

pub use anchors::{decode_box, encode_box, iou_2d, Anchor, AnchorConfig, AnchorGrid, DecodedBox, DEPTH_COL, REG_DIM};
pub use encoder::{Encoder, EncoderConfig};
pub use head::{
    assign_anchors, decode_detections, AnchorLabel, Assignment, DetectOptions, DetectionHead, HeadConfig, OdBreakdown,
    OdTerms, OUT_DIM,
};

use crate::kitti::format_kitti_label;
use crate::scene::{ObjectClass, SceneAnnotation};

/// A scored 3D car detection. `location` is the bottom-face center.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub bbox2d: [f64; 4],
    pub location: [f64; 3],
    pub dimensions: [f64; 3],
    pub yaw: f64,
    pub alpha: f64,
}

impl Detection {
    pub fn to_annotation(&self) -> SceneAnnotation {
        SceneAnnotation {
            class: ObjectClass::Car,
            truncation: 0.0,
            occlusion: 0,
            alpha: self.alpha,
            bbox2d: self.bbox2d,
            dimensions: self.dimensions,
            location: self.location,
            yaw: self.yaw,
        }
    }

    /// KITTI result line (label fields plus score).
    pub fn to_kitti_line(&self) -> String {
        format_kitti_label(&self.to_annotation(), Some(self.score))
    }
}

/// Greedy non-maximum suppression; returns kept indices by descending score
/// (ties by index).
pub fn nms(boxes: &[[f64; 4]], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou_2d(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}
