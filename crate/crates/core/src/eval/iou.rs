use crate::error::{Error, Result};
use crate::scene::SceneAnnotation;

/// Ground-plane footprint: center `(x, z)`, width, length, yaw about the
/// vertical axis (camera convention, length along `x` at yaw 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevBox {
    pub x: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

/// Footprint plus vertical extent `[y − h, y]` (y points down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3d {
    pub bev: BevBox,
    pub y: f64,
    pub h: f64,
}

impl Box3d {
    pub fn from_annotation(a: &SceneAnnotation) -> Self {
        Self {
            bev: BevBox {
                x: a.location[0],
                z: a.location[2],
                w: a.dimensions[1],
                l: a.dimensions[2],
                yaw: a.yaw,
            },
            y: a.location[1],
            h: a.dimensions[0],
        }
    }

    pub fn volume(&self) -> f64 {
        self.bev.area() * self.h
    }
}

impl BevBox {
    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Corners in counter-clockwise order in the `(x, z)` plane.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let pts = [
            (self.l / 2.0, self.w / 2.0),
            (-self.l / 2.0, self.w / 2.0),
            (-self.l / 2.0, -self.w / 2.0),
            (self.l / 2.0, -self.w / 2.0),
        ];
        let mut out = pts.map(|(dx, dz)| [self.x + c * dx + s * dz, self.z - s * dx + c * dz]);
        if signed_area(&out) < 0.0 {
            out.reverse();
        }
        out
    }

    /// Whether `(x, z)` lies inside the footprint.
    pub fn contains(&self, x: f64, z: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dz) = (x - self.x, z - self.z);
        let lx = c * dx - s * dz;
        let lz = s * dx + c * dz;
        lx.abs() <= self.l / 2.0 && lz.abs() <= self.w / 2.0
    }

    fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.l > 0.0) || ![self.x, self.z, self.w, self.l, self.yaw].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("degenerate box {self:?}")));
        }
        Ok(())
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Clips `subject` by the convex counter-clockwise polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Area of the intersection of two footprints.
pub fn bev_intersection(a: &BevBox, b: &BevBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let poly = clip_polygon(&a.corners(), &b.corners());
    Ok(if poly.len() < 3 { 0.0 } else { signed_area(&poly).abs() })
}

pub fn bev_iou(a: &BevBox, b: &BevBox) -> Result<f64> {
    let inter = bev_intersection(a, b)?;
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Vertical overlap of `[y − h, y]` intervals.
fn height_overlap(a: &Box3d, b: &Box3d) -> f64 {
    (a.y.min(b.y) - (a.y - a.h).max(b.y - b.h)).max(0.0)
}

pub fn iou_3d(a: &Box3d, b: &Box3d) -> Result<f64> {
    if !(a.h > 0.0 && b.h > 0.0) {
        return Err(Error::InvalidArgument("box height must be positive".into()));
    }
    let inter = bev_intersection(&a.bev, &b.bev)? * height_overlap(a, b);
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn unit(x: f64, z: f64, yaw: f64) -> BevBox {
        BevBox { x, z, w: 1.0, l: 1.0, yaw }
    }

    #[test]
    fn bev_examples() {
        assert!((bev_iou(&unit(0.0, 0.0, 0.3), &unit(0.0, 0.0, 0.3)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bev_iou(&unit(0.0, 0.0, 0.0), &unit(5.0, 0.0, 0.0)).unwrap(), 0.0);
        assert!((bev_iou(&unit(0.0, 0.0, 0.0), &unit(0.5, 0.0, 0.0)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let degenerate = BevBox { w: 0.0, ..unit(0.0, 0.0, 0.0) };
        assert!(bev_iou(&degenerate, &unit(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn rotated_square_inside_itself() {
        // A unit square rotated 45° about the same center: the overlap is a
        // regular octagon of area 2(√2 − 1).
        let want = 2.0 * (2f64.sqrt() - 1.0);
        let inter = bev_intersection(&unit(0.0, 0.0, 0.0), &unit(0.0, 0.0, std::f64::consts::FRAC_PI_4)).unwrap();
        assert!((inter - want).abs() < 1e-12);
    }

    #[test]
    fn disjoint_heights_give_zero() {
        let a = Box3d { bev: unit(0.0, 0.0, 0.0), y: 0.0, h: 1.0 };
        let b = Box3d { y: -2.0, ..a };
        assert_eq!(iou_3d(&a, &b).unwrap(), 0.0);
        assert!((iou_3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn axis_aligned_matches_closed_form(
            x in -3f64..3.0, z in -3f64..3.0, w1 in 0.2f64..4.0, l1 in 0.2f64..4.0, w2 in 0.2f64..4.0, l2 in 0.2f64..4.0,
        ) {
            let a = BevBox { x: 0.0, z: 0.0, w: w1, l: l1, yaw: 0.0 };
            let b = BevBox { x, z, w: w2, l: l2, yaw: 0.0 };
            let ix = ((l1 / 2.0).min(x + l2 / 2.0) - (-l1 / 2.0).max(x - l2 / 2.0)).max(0.0);
            let iz = ((w1 / 2.0).min(z + w2 / 2.0) - (-w1 / 2.0).max(z - w2 / 2.0)).max(0.0);
            let want = ix * iz / (w1 * l1 + w2 * l2 - ix * iz);
            prop_assert!((bev_iou(&a, &b).unwrap() - want).abs() < 1e-9);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            x in -3f64..3.0, z in -3f64..3.0, y1 in -3f64..3.0, y2 in -3f64..3.0, w in 0.2f64..4.0, l in 0.2f64..4.0, h in 0.2f64..3.0,
        ) {
            let a = Box3d { bev: BevBox { x: 0.0, z: 0.0, w: 1.6, l: 4.0, yaw: y1 }, y: 1.6, h: 1.5 };
            let b = Box3d { bev: BevBox { x, z, w, l, yaw: y2 }, y: 1.0 + x / 3.0, h };
            let ab = iou_3d(&a, &b).unwrap();
            prop_assert!((ab - iou_3d(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let bev = bev_iou(&a.bev, &b.bev).unwrap();
            prop_assert!((bev - bev_iou(&b.bev, &a.bev).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&bev));
            prop_assert!((iou_3d(&b, &b).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
