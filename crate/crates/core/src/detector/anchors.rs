use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{wrap_angle, CalibMatrix, SceneAnnotation};

/// Regression outputs per anchor, after the classification logit.
pub const REG_DIM: usize = 12;
/// Column of the log-depth ratio inside the regression block.
pub const DEPTH_COL: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Anchor box heights in pixels.
    pub heights: Vec<f64>,
    /// Width / height ratios.
    pub aspects: Vec<f64>,
    /// Mean object dimensions (h, w, l); also sets the depth prior.
    pub mean_dims: [f64; 3],
    /// Camera height above a flat ground plane (meters). When set, anchors
    /// whose bottom edge lies below the horizon take their depth prior from
    /// the ground plane instead of the mean object height.
    #[serde(default)]
    pub camera_height: Option<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            heights: vec![8.0, 13.0, 21.0, 34.0],
            aspects: vec![1.3, 2.6],
            mean_dims: [1.55, 1.7, 4.1],
            camera_height: Some(1.65),
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        let all_pos = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite());
        let cam_ok = self.camera_height.map_or(true, |h| h > 0.0 && h.is_finite());
        if !all_pos(&self.heights) || !all_pos(&self.aspects) || !all_pos(&self.mean_dims) || !cam_ok {
            return Err(Error::Config("anchor priors must be nonempty and positive".into()));
        }
        Ok(())
    }

    pub fn per_cell(&self) -> usize {
        self.heights.len() * self.aspects.len()
    }
}

/// 2D box prior plus a depth prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub z: f64,
}

impl Anchor {
    pub fn bbox(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

/// Anchors for every cell of a feature map, ordered by cell (row-major) and
/// then by template; this matches the head's output layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<Anchor>,
    pub config: AnchorConfig,
}

impl AnchorGrid {
    pub fn new(feat_h: usize, feat_w: usize, stride: f64, calib: &CalibMatrix, config: &AnchorConfig) -> Result<Self> {
        config.validate()?;
        let focal = calib.focal_y();
        let horizon = calib.p2[1][2];
        if focal <= 0.0 || stride <= 0.0 {
            return Err(Error::InvalidArgument("anchor grid needs positive focal and stride".into()));
        }
        let mut anchors = Vec::with_capacity(feat_h * feat_w * config.per_cell());
        for y in 0..feat_h {
            for x in 0..feat_w {
                let cy = (y as f64 + 0.5) * stride;
                for &h in &config.heights {
                    let below = cy + h / 2.0 - horizon;
                    let z = match config.camera_height {
                        Some(cam) if below >= 1.0 => focal * cam / below,
                        _ => focal * config.mean_dims[0] / h,
                    };
                    for &a in &config.aspects {
                        anchors.push(Anchor {
                            cx: (x as f64 + 0.5) * stride,
                            cy,
                            w: h * a,
                            h,
                            z,
                        });
                    }
                }
            }
        }
        Ok(Self {
            anchors,
            config: config.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// A decoded 3D box.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedBox {
    pub bbox2d: [f64; 4],
    /// Bottom-face center.
    pub location: [f64; 3],
    pub dimensions: [f64; 3],
    pub yaw: f64,
    pub alpha: f64,
}

/// Regression targets of `ann` relative to `anchor`:
/// `[dx, dy, dw, dh, du, dv, dz, lh, lw, ll, sin α, cos α]`.
pub fn encode_box(anchor: &Anchor, ann: &SceneAnnotation, calib: &CalibMatrix, mean_dims: [f64; 3]) -> Result<[f64; REG_DIM]> {
    let b = ann.bbox2d;
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    if w <= 0.0 || h <= 0.0 || ann.dimensions.iter().any(|d| *d <= 0.0) {
        return Err(Error::InvalidArgument("cannot encode a degenerate box".into()));
    }
    let c = ann.center();
    let [u, v] = calib
        .project(c)
        .ok_or_else(|| Error::InvalidArgument("object behind the camera".into()))?;
    Ok([
        ((b[0] + b[2]) / 2.0 - anchor.cx) / anchor.w,
        ((b[1] + b[3]) / 2.0 - anchor.cy) / anchor.h,
        (w / anchor.w).ln(),
        (h / anchor.h).ln(),
        (u - anchor.cx) / anchor.w,
        (v - anchor.cy) / anchor.h,
        (c[2] / anchor.z).ln(),
        (ann.dimensions[0] / mean_dims[0]).ln(),
        (ann.dimensions[1] / mean_dims[1]).ln(),
        (ann.dimensions[2] / mean_dims[2]).ln(),
        ann.alpha.sin(),
        ann.alpha.cos(),
    ])
}

pub fn decode_box(anchor: &Anchor, r: &[f64], calib: &CalibMatrix, mean_dims: [f64; 3]) -> DecodedBox {
    let cx = anchor.cx + r[0] * anchor.w;
    let cy = anchor.cy + r[1] * anchor.h;
    let w = anchor.w * r[2].exp();
    let h = anchor.h * r[3].exp();
    let u = anchor.cx + r[4] * anchor.w;
    let v = anchor.cy + r[5] * anchor.h;
    let z = anchor.z * r[6].exp();
    let dims = [
        mean_dims[0] * r[7].exp(),
        mean_dims[1] * r[8].exp(),
        mean_dims[2] * r[9].exp(),
    ];
    let alpha = r[10].atan2(r[11]);
    let center = calib.unproject(u, v, z);
    let location = [center[0], center[1] + dims[0] / 2.0, center[2]];
    DecodedBox {
        bbox2d: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
        location,
        dimensions: dims,
        yaw: wrap_angle(alpha + center[0].atan2(center[2])),
        alpha,
    }
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
pub fn iou_2d(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::scene::{generate_scene, ObjectClass, SceneConfig};

    #[test]
    fn grid_layout_and_depth_prior() {
        let cfg = AnchorConfig {
            heights: vec![6.0, 10.0, 16.0, 26.0],
            camera_height: None,
            ..AnchorConfig::default()
        };
        let calib = CalibMatrix::pinhole(150.0, 96.0, 20.0);
        let g = AnchorGrid::new(2, 3, 8.0, &calib, &cfg).unwrap();
        assert_eq!(g.len(), 6 * cfg.per_cell());
        let a = g.anchors[cfg.per_cell() * 4];
        assert_eq!((a.cx, a.cy), (12.0, 12.0));
        assert!((g.anchors[0].z - 150.0 * 1.55 / 6.0).abs() < 1e-12);
        assert!(AnchorGrid::new(2, 2, 8.0, &calib, &AnchorConfig { heights: vec![], ..cfg }).is_err());
    }

    #[test]
    fn ground_plane_prior_below_the_horizon() {
        let cfg = AnchorConfig {
            heights: vec![6.0, 10.0, 16.0, 26.0],
            ..AnchorConfig::default()
        };
        let calib = CalibMatrix::pinhole(150.0, 96.0, 20.0);
        let g = AnchorGrid::new(8, 1, 8.0, &calib, &cfg).unwrap();
        // Row 3 (cy = 28), height 10: bottom at 33, 13 px below the horizon.
        let a = g.anchors[3 * cfg.per_cell() + cfg.aspects.len()];
        assert_eq!((a.cy, a.h), (28.0, 10.0));
        assert!((a.z - 150.0 * 1.65 / 13.0).abs() < 1e-12);
        // Row 0 (cy = 4), height 6: bottom above the horizon, size prior.
        assert!((g.anchors[0].z - 150.0 * 1.55 / 6.0).abs() < 1e-12);
        let bad = AnchorConfig {
            camera_height: Some(-1.0),
            ..AnchorConfig::default()
        };
        assert!(AnchorGrid::new(1, 1, 8.0, &calib, &bad).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou_2d(&[0.0, 0.0, 2.0, 2.0], &[0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(iou_2d(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((iou_2d(&[0.0, 0.0, 2.0, 1.0], &[1.0, 0.0, 3.0, 1.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn encoded_boxes_decode_back(seed in 0u64..5000, which in 0usize..64) {
            let cfg = SceneConfig::default();
            let s = generate_scene(seed, &cfg).unwrap();
            let grid = AnchorGrid::new(8, 24, 8.0, &s.calib, &AnchorConfig::default()).unwrap();
            let anchor = grid.anchors[which * 7 % grid.len()];
            let dims = AnchorConfig::default().mean_dims;
            for a in s.annotations.iter().filter(|a| a.class == ObjectClass::Car) {
                let r = encode_box(&anchor, a, &s.calib, dims).unwrap();
                let d = decode_box(&anchor, &r, &s.calib, dims);
                for i in 0..4 {
                    prop_assert!((d.bbox2d[i] - a.bbox2d[i]).abs() < 1e-5);
                }
                for i in 0..3 {
                    prop_assert!((d.location[i] - a.location[i]).abs() < 1e-5);
                    prop_assert!((d.dimensions[i] - a.dimensions[i]).abs() < 1e-5);
                }
                prop_assert!(wrap_angle(d.yaw - a.yaw).abs() < 1e-5);
            }
        }
    }
}
