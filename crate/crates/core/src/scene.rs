//! Procedural driving scenes: cars rendered as shaded cuboids on a ground
//! plane, with dense metric depth and KITTI-style annotations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image with values in `[0, 1]`, stored height × width × 3.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ColorImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("ColorImage", &[height, width, 3], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width, 3], self.data.clone())
    }
}

/// Dense per-pixel metric distance.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("DepthMap", &[height, width], &[values.len()]));
        }
        if values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidArgument("depth values must be ≥ 0".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Ignore,
}

impl ObjectClass {
    pub fn from_kitti(name: &str) -> Self {
        match name {
            "Car" => ObjectClass::Car,
            _ => ObjectClass::Ignore,
        }
    }

    pub fn kitti_name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Ignore => "DontCare",
        }
    }
}

/// One labelled object in KITTI camera coordinates (x right, y down, z
/// forward). `location` is the bottom-face center; `dimensions` are
/// `(height, width, length)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneAnnotation {
    pub class: ObjectClass,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox2d: [f64; 4],
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub yaw: f64,
}

impl SceneAnnotation {
    pub fn bbox_height(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }

    /// Geometric center of the 3D box.
    pub fn center(&self) -> [f64; 3] {
        [
            self.location[0],
            self.location[1] - self.dimensions[0] / 2.0,
            self.location[2],
        ]
    }

    /// The eight box corners in camera coordinates.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        box_corners(self.location, self.dimensions, self.yaw)
    }

    pub fn fits(&self, difficulty: Difficulty, thresholds: &DifficultyThresholds) -> bool {
        let i = difficulty.index();
        self.class == ObjectClass::Car
            && self.bbox_height() >= thresholds.min_height[i]
            && self.occlusion <= thresholds.max_occlusion[i]
            && self.truncation <= thresholds.max_truncation[i]
    }
}

pub fn box_corners(location: [f64; 3], dims: [f64; 3], yaw: f64) -> [[f64; 3]; 8] {
    let [h, w, l] = dims;
    let (s, c) = yaw.sin_cos();
    let mut out = [[0.0; 3]; 8];
    let mut n = 0;
    for dy in [0.0, -h] {
        for (dx, dz) in [
            (l / 2.0, w / 2.0),
            (l / 2.0, -w / 2.0),
            (-l / 2.0, -w / 2.0),
            (-l / 2.0, w / 2.0),
        ] {
            out[n] = [
                location[0] + c * dx + s * dz,
                location[1] + dy,
                location[2] - s * dx + c * dz,
            ];
            n += 1;
        }
    }
    out
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Observation angle from global yaw and object position.
pub fn observation_angle(yaw: f64, x: f64, z: f64) -> f64 {
    wrap_angle(yaw - x.atan2(z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn index(self) -> usize {
        match self {
            Difficulty::Easy => 0,
            Difficulty::Moderate => 1,
            Difficulty::Hard => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

/// Easy / Moderate / Hard admission thresholds (devkit convention).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyThresholds {
    pub min_height: [f64; 3],
    pub max_occlusion: [i32; 3],
    pub max_truncation: [f64; 3],
}

impl DifficultyThresholds {
    /// Devkit thresholds (40 / 25 / 25 px on 375-px-tall frames) with the
    /// pixel heights rescaled to an image of `image_height` rows.
    pub fn devkit_scaled(image_height: usize) -> Self {
        let s = image_height as f64 / 375.0;
        Self {
            min_height: [40.0 * s, 25.0 * s, 25.0 * s],
            max_occlusion: [0, 1, 2],
            max_truncation: [0.15, 0.3, 0.5],
        }
    }
}

/// A 3 × 4 camera projection matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibMatrix {
    pub p2: [[f64; 4]; 3],
}

impl CalibMatrix {
    pub fn new(p2: [[f64; 4]; 3]) -> Result<Self> {
        if p2.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::CalibFormat("non-finite entry".into()));
        }
        if p2[0][0] <= 0.0 || p2[1][1] <= 0.0 {
            return Err(Error::CalibFormat("focal terms must be positive".into()));
        }
        Ok(Self { p2 })
    }

    /// Pinhole camera with zero translation.
    pub fn pinhole(focal: f64, cx: f64, cy: f64) -> Self {
        Self {
            p2: [
                [focal, 0.0, cx, 0.0],
                [0.0, focal, cy, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn focal_y(&self) -> f64 {
        self.p2[1][1]
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let row = |r: &[f64; 4]| r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + r[3];
        let w = row(&self.p2[2]);
        if w <= 1e-9 {
            return None;
        }
        Some([row(&self.p2[0]) / w, row(&self.p2[1]) / w])
    }

    /// The camera-frame point with depth `z` that projects to `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        let p = &self.p2;
        // u·(P2·X) = P0·X and v·(P2·X) = P1·X, linear in (x, y) once z is known.
        let a11 = p[0][0] - u * p[2][0];
        let a12 = p[0][1] - u * p[2][1];
        let b1 = u * (p[2][2] * z + p[2][3]) - p[0][2] * z - p[0][3];
        let a21 = p[1][0] - v * p[2][0];
        let a22 = p[1][1] - v * p[2][1];
        let b2 = v * (p[2][2] * z + p[2][3]) - p[1][2] * z - p[1][3];
        let det = a11 * a22 - a12 * a21;
        let x = (b1 * a22 - a12 * b2) / det;
        let y = (a11 * b2 - a21 * b1) / det;
        [x, y, z]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    /// Image row of the horizon (principal point y).
    pub horizon_row: f64,
    pub camera_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub lateral_range: f64,
    /// Distance assigned to sky pixels.
    pub sky_distance: f64,
    pub difficulty: DifficultyThresholds,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 192,
            focal: 150.0,
            horizon_row: 20.0,
            camera_height: 1.65,
            min_objects: 1,
            max_objects: 4,
            min_depth: 6.0,
            max_depth: 26.0,
            lateral_range: 7.0,
            sky_distance: 200.0,
            difficulty: DifficultyThresholds::devkit_scaled(64),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if self.focal <= 0.0 || self.camera_height <= 0.0 || self.sky_distance <= 0.0 {
            return bad("focal, camera height and sky distance must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return bad("depth range must satisfy 0 < min_depth < max_depth");
        }
        if self.lateral_range < 0.0 {
            return bad("lateral range must be nonnegative");
        }
        Ok(())
    }

    pub fn calib(&self) -> CalibMatrix {
        CalibMatrix::pinhole(self.focal, self.width as f64 / 2.0, self.horizon_row)
    }
}

/// A clear scene before fog is added.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub image: ColorImage,
    pub depth: DepthMap,
    pub annotations: Vec<SceneAnnotation>,
    pub calib: CalibMatrix,
}

/// Paired clear and foggy renderings of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FogPair {
    pub seed: u64,
    pub clear_image: ColorImage,
    pub foggy_image: ColorImage,
    pub depth: DepthMap,
    pub annotations: Vec<SceneAnnotation>,
    pub calib: CalibMatrix,
    pub density: f64,
}

struct Car {
    ann: SceneAnnotation,
    color: [f64; 3],
}

fn ray_box(origin_l: [f64; 3], dir_l: [f64; 3], half: [f64; 3]) -> Option<(f64, usize, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        if dir_l[a].abs() < 1e-12 {
            if origin_l[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t1 = (-half[a] - origin_l[a]) / dir_l[a];
        let t2 = (half[a] - origin_l[a]) / dir_l[a];
        let (lo, hi, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if lo > t_near {
            t_near = lo;
            axis = a;
            sign = s;
        }
        t_far = t_far.min(hi);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, axis, sign))
}

impl Car {
    /// Ray parameter and world-frame normal of the first hit.
    fn hit(&self, dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let c = self.ann.center();
        let (s, co) = self.ann.yaw.sin_cos();
        // world = R·local + c, R = [[c,0,s],[0,1,0],[-s,0,c]]
        let to_local = |v: [f64; 3]| [co * v[0] - s * v[2], v[1], s * v[0] + co * v[2]];
        let o = to_local([-c[0], -c[1], -c[2]]);
        let d = to_local(dir);
        let [h, w, l] = self.ann.dimensions;
        let (t, axis, sign) = ray_box(o, d, [l / 2.0, h / 2.0, w / 2.0])?;
        let mut n_l = [0.0; 3];
        n_l[axis] = sign;
        let n = [co * n_l[0] + s * n_l[2], n_l[1], -s * n_l[0] + co * n_l[2]];
        Some((t, n))
    }
}

fn sample_car(rng: &mut ChaCha8Rng, cfg: &SceneConfig, calib: &CalibMatrix) -> Option<SceneAnnotation> {
    let z = rng.gen_range(cfg.min_depth..cfg.max_depth);
    let x = if cfg.lateral_range > 0.0 {
        rng.gen_range(-cfg.lateral_range..cfg.lateral_range)
    } else {
        0.0
    };
    let dims = [
        rng.gen_range(1.4..1.7),
        rng.gen_range(1.55..1.85),
        rng.gen_range(3.6..4.6),
    ];
    let yaw = rng.gen_range(-PI..PI);
    let location = [x, cfg.camera_height, z];
    let corners = box_corners(location, dims, yaw);
    let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in corners {
        let [u, v] = calib.project(c)?;
        bb[0] = bb[0].min(u);
        bb[1] = bb[1].min(v);
        bb[2] = bb[2].max(u);
        bb[3] = bb[3].max(v);
    }
    if bb[0] < 0.0 || bb[1] < 0.0 || bb[2] > (cfg.width - 1) as f64 || bb[3] > (cfg.height - 1) as f64 {
        return None;
    }
    Some(SceneAnnotation {
        class: ObjectClass::Car,
        truncation: 0.0,
        occlusion: 0,
        alpha: observation_angle(yaw, x, z),
        bbox2d: bb,
        dimensions: dims,
        location,
        yaw,
    })
}

/// Renders a deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib = cfg.calib();
    let target = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut cars: Vec<Car> = Vec::new();
    let mut attempts = 0;
    while cars.len() < target && attempts < 200 {
        attempts += 1;
        let Some(ann) = sample_car(&mut rng, cfg, &calib) else {
            continue;
        };
        let clear = cars.iter().all(|c| {
            let dx = c.ann.location[0] - ann.location[0];
            let dz = c.ann.location[2] - ann.location[2];
            (dx * dx + dz * dz).sqrt() > 5.5
        });
        if !clear {
            continue;
        }
        let color = [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ];
        cars.push(Car { ann, color });
    }
    let road_tint: f64 = rng.gen_range(0.32..0.42);
    let sky = [
        rng.gen_range(0.62..0.72),
        rng.gen_range(0.72..0.8),
        rng.gen_range(0.85..0.95),
    ];

    let (h, w) = (cfg.height, cfg.width);
    let light = {
        let l: [f64; 3] = [0.3, -1.0, -0.5];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [-l[0] / n, -l[1] / n, -l[2] / n]
    };
    let mut image = ColorImage::filled(h, w, [0.0; 3]);
    let mut depth = vec![0.0; h * w];
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut footprint = vec![0usize; cars.len()];
    let cx = w as f64 / 2.0;
    for py in 0..h {
        for px in 0..w {
            let dir = [
                (px as f64 + 0.5 - cx) / cfg.focal,
                (py as f64 + 0.5 - cfg.horizon_row) / cfg.focal,
                1.0,
            ];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + 1.0).sqrt();
            let mut best: Option<(f64, usize, [f64; 3])> = None;
            for (k, car) in cars.iter().enumerate() {
                if let Some((t, n)) = car.hit(dir) {
                    footprint[k] += 1;
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, k, n));
                    }
                }
            }
            let i = py * w + px;
            let (rgb, dist) = if let Some((t, k, n)) = best {
                owner[i] = Some(k);
                let dist = t * norm;
                let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                let shade = (0.35 + 0.65 * lambert) / (1.0 + dist / 60.0);
                let c = cars[k].color;
                ([c[0] * shade, c[1] * shade, c[2] * shade], dist)
            } else if dir[1] > 1e-9 {
                let t = cfg.camera_height / dir[1];
                let gx = dir[0] * t;
                let gz = t;
                let lane = ((gx + 1.75).rem_euclid(3.5) < 0.12) && (gz.rem_euclid(6.0) < 3.0);
                let tex = if ((gx.floor() as i64 + gz.floor() as i64) & 1) == 0 { 0.02 } else { -0.02 };
                let g = if lane { 0.85 } else { road_tint + tex };
                ([g, g, g * 1.02], (t * norm).min(cfg.sky_distance))
            } else {
                let f = py as f64 / cfg.horizon_row.max(1.0);
                ([sky[0] + 0.05 * f, sky[1] + 0.04 * f, sky[2]], cfg.sky_distance)
            };
            image.set_pixel(py, px, rgb.map(|v| v.clamp(0.0, 1.0)));
            depth[i] = dist;
        }
    }
    let mut visible = vec![0usize; cars.len()];
    for k in owner.iter().flatten() {
        visible[*k] += 1;
    }
    let annotations = cars
        .into_iter()
        .enumerate()
        .map(|(k, car)| {
            let mut ann = car.ann;
            let hidden = 1.0 - visible[k] as f64 / footprint[k].max(1) as f64;
            ann.occlusion = if hidden < 0.1 {
                0
            } else if hidden < 0.5 {
                1
            } else {
                2
            };
            ann
        })
        .collect();
    Ok(Scene {
        seed,
        image,
        depth: DepthMap::new(h, w, depth)?,
        annotations,
        calib,
    })
}
