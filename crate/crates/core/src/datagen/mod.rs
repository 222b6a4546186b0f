//! Synthetic paired LiDAR/camera frames with exact per-point labels, plus
//! weak-label (scribble) and semi-supervised frame-subset simulators.

mod format;
pub mod scene;
mod scribble;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Extrinsics, Intrinsics, PointCloud, Vec3};

pub use format::{read_frame, read_frame_file, write_frame, write_frame_file, FRAME_MAGIC};
pub use scene::{beam_direction, Hit, SceneLayout, ShapeKind, Solid};
pub use scribble::{sample_frames, scribble_sim, semi_supervise, ScribbleOutcome};

/// Background class: ground plane and sky.
pub const GROUND_CLASS: u16 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Synthetic, densely annotated images with shifted colour statistics.
    Source,
    /// The "real" domain the LiDAR data lives in.
    Target,
}

/// Size and count ranges of one object class. Ranges are `(min, max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectClass {
    pub name: String,
    pub shape: ShapeKind,
    pub count: (usize, usize),
    /// Box length, or cylinder diameter.
    pub length: (f64, f64),
    /// Box width; ignored for cylinders.
    pub width: (f64, f64),
    pub height: (f64, f64),
}

impl ObjectClass {
    /// Largest horizontal extent the class can be generated with.
    pub fn max_extent(&self) -> f64 {
        match self.shape {
            ShapeKind::Cylinder => self.length.1,
            ShapeKind::Box => self.length.1.max(self.width.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidarConfig {
    pub azimuth_steps: usize,
    /// Beam elevations in degrees.
    pub elevations_deg: Vec<f64>,
    pub max_range: f64,
    pub sensor_height: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    /// Camera centre in the LiDAR frame.
    pub center: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Object classes `1..C`; class 0 is the ground/background.
    pub objects: Vec<ObjectClass>,
    pub lidar: LidarConfig,
    pub camera: CameraConfig,
    /// Object centres are placed at horizontal distances in this range.
    pub placement_range: (f64, f64),
    /// Standard deviation of additive range noise (metres).
    pub range_noise: f64,
    /// Standard deviation of additive pixel noise.
    pub image_noise: f64,
    pub domain: Domain,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects: vec![
                ObjectClass {
                    name: "pole".into(),
                    shape: ShapeKind::Cylinder,
                    count: (6, 10),
                    length: (0.4, 0.8),
                    width: (0.0, 0.0),
                    height: (0.9, 1.6),
                },
                ObjectClass {
                    name: "car".into(),
                    shape: ShapeKind::Box,
                    count: (5, 8),
                    length: (3.6, 4.6),
                    width: (1.6, 2.0),
                    height: (1.3, 1.7),
                },
                ObjectClass {
                    name: "building".into(),
                    shape: ShapeKind::Box,
                    count: (3, 5),
                    length: (6.0, 12.0),
                    width: (3.0, 6.0),
                    height: (3.0, 6.0),
                },
            ],
            lidar: LidarConfig {
                azimuth_steps: 240,
                elevations_deg: vec![-22.0, -17.0, -13.0, -10.0, -7.5, -5.5, -4.0, -3.0, -2.2, -1.6, 0.5, 2.0],
                max_range: 50.0,
                sensor_height: 1.7,
            },
            camera: CameraConfig {
                width: 64,
                height: 24,
                hfov_deg: 90.0,
                center: [0.3, 0.0, -0.2],
            },
            placement_range: (4.0, 40.0),
            range_noise: 0.0,
            image_noise: 0.02,
            domain: Domain::Target,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.objects.len() + 1
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    /// Classes whose generated horizontal extent stays below one metre.
    pub fn small_classes(&self) -> Vec<bool> {
        std::iter::once(false)
            .chain(self.objects.iter().map(|o| o.max_extent() < 1.0))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(Error::Config("at least one object class is required (C >= 2)".into()));
        }
        if !(self.camera.hfov_deg > 0.0 && self.camera.hfov_deg < 180.0) {
            return Err(Error::Config(format!(
                "camera horizontal FOV must lie in (0, 180) degrees, got {}",
                self.camera.hfov_deg
            )));
        }
        if self.lidar.azimuth_steps == 0 || self.lidar.elevations_deg.is_empty() {
            return Err(Error::Config("LiDAR needs azimuth steps and beam elevations".into()));
        }
        if self.lidar.max_range <= 0.0 || self.lidar.sensor_height <= 0.0 {
            return Err(Error::Config("LiDAR range and mounting height must be positive".into()));
        }
        let (a, b) = self.placement_range;
        if !(a > 0.0 && b > a) {
            return Err(Error::Config(format!("bad placement range ({a}, {b})")));
        }
        if self.range_noise < 0.0 || self.image_noise < 0.0 {
            return Err(Error::Config("noise magnitudes must be non-negative".into()));
        }
        Intrinsics::from_hfov(self.camera.width, self.camera.height, self.camera.hfov_deg)?;
        Ok(())
    }

    pub fn camera_model(&self) -> Result<CameraModel> {
        let intr = Intrinsics::from_hfov(self.camera.width, self.camera.height, self.camera.hfov_deg)?;
        Ok(CameraModel::new(
            intr,
            Extrinsics::forward_camera(self.camera.center, 0.0),
        ))
    }
}

/// Camera image: raw colour channels plus the dense class map.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: u32,
    pub width: u32,
    /// `H × W × 3`, row-major, values in `[0, 1]`.
    pub raw: Vec<f64>,
    /// `H × W` class ids.
    pub classes: Vec<u16>,
}

impl Image {
    pub fn num_pixels(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = 3 * (row * self.width as usize + col);
        [self.raw[i], self.raw[i + 1], self.raw[i + 2]]
    }
}

/// One training/evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub cam: CameraModel,
    pub image: Image,
    pub num_classes: u32,
    /// Exact class of every point.
    pub labels: Vec<u16>,
    /// Points whose label may be used for training.
    pub weak_mask: Vec<bool>,
    pub frame_labeled: bool,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn num_weak(&self) -> usize {
        self.weak_mask.iter().filter(|&&m| m).count()
    }

    /// Marks every point as labeled (dense supervision).
    pub fn densely_labeled(mut self) -> Self {
        self.weak_mask = vec![true; self.len()];
        self.frame_labeled = true;
        self
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        if self.labels.len() != n || self.weak_mask.len() != n {
            return Err(Error::InvalidInput(format!(
                "frame has {n} points but {} labels and {} mask entries",
                self.labels.len(),
                self.weak_mask.len()
            )));
        }
        if !self.frame_labeled && self.weak_mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("unlabeled frame carries weak labels".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as u32 >= self.num_classes) {
            return Err(Error::InvalidInput(format!("label {bad} out of range")));
        }
        if self.image.width != self.cam.width() || self.image.height != self.cam.height() {
            return Err(Error::InvalidInput("image extent differs from camera".into()));
        }
        Ok(())
    }
}

/// Generates a frame; see [`gen_scene_with_layout`].
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<Frame> {
    gen_scene_with_layout(seed, cfg).map(|(f, _)| f)
}

/// Generates a frame and returns the solid layout it was sampled from.
///
/// Geometry depends only on `seed`; the domain tag only changes the image
/// colours, so source and target renderings share the class map.
pub fn gen_scene_with_layout(seed: u64, cfg: &SceneConfig) -> Result<(Frame, SceneLayout)> {
    cfg.validate()?;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(seed);
    geo_rng.set_stream(1);
    let ground_z = -cfg.lidar.sensor_height;
    let solids = scene::place_solids(
        &mut geo_rng,
        &cfg.objects,
        ground_z,
        cfg.placement_range.0,
        cfg.placement_range.1,
    );
    let layout = SceneLayout { ground_z, solids };
    let tints: Vec<[f64; 3]> = layout
        .solids
        .iter()
        .map(|_| {
            let mut t = [0.0; 3];
            for v in &mut t {
                *v = geo_rng.random_range(-0.06..0.06);
            }
            t
        })
        .collect();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(2);
    let (points, labels) = scan(&layout, &cfg.lidar, cfg.range_noise, &mut noise_rng);

    let cam = cfg.camera_model()?;
    let mut img_rng = ChaCha8Rng::seed_from_u64(seed);
    img_rng.set_stream(match cfg.domain {
        Domain::Target => 3,
        Domain::Source => 4,
    });
    let image = render(&layout, &tints, &cam, cfg, &mut img_rng);

    let n = points.len();
    let frame = Frame {
        cloud: PointCloud::new(points),
        cam,
        image,
        num_classes: cfg.num_classes() as u32,
        labels,
        weak_mask: vec![false; n],
        frame_labeled: true,
    };
    Ok((frame, layout))
}

/// Ring-major, azimuth-minor first-hit scan from the sensor origin.
fn scan(layout: &SceneLayout, lidar: &LidarConfig, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<Vec3>, Vec<u16>) {
    let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("positive std"));
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let origin = [0.0; 3];
    for &elev in &lidar.elevations_deg {
        for a in 0..lidar.azimuth_steps {
            let az = 2.0 * std::f64::consts::PI * a as f64 / lidar.azimuth_steps as f64;
            let d = beam_direction(az, elev.to_radians());
            if let Some(hit) = layout.cast(&origin, &d, lidar.max_range) {
                let t = hit.t + normal.as_ref().map_or(0.0, |n| n.sample(rng));
                points.push([t * d[0], t * d[1], t * d[2]]);
                labels.push(layout.class_of(&hit));
            }
        }
    }
    (points, labels)
}

const SKY: [f64; 3] = [0.60, 0.75, 0.92];
const LIGHT: [f64; 3] = [0.4, 0.3, 0.866];
const RENDER_RANGE: f64 = 120.0;

/// Base colour of a class in the target domain.
pub fn class_color(class: u16) -> [f64; 3] {
    match class {
        0 => [0.38, 0.38, 0.40],
        1 => [0.85, 0.30, 0.25],
        2 => [0.25, 0.40, 0.80],
        3 => [0.80, 0.60, 0.25],
        c => {
            let h = (c as f64 * 0.618_034).fract() * 6.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [0.2 + 0.6 * r, 0.2 + 0.6 * g, 0.2 + 0.6 * b]
        }
    }
}

/// Fixed invertible colour transform that separates the source domain.
pub fn source_color_transform(c: [f64; 3]) -> [f64; 3] {
    const M: [[f64; 3]; 3] = [[0.25, 0.65, 0.10], [0.10, 0.25, 0.65], [0.65, 0.10, 0.25]];
    const B: [f64; 3] = [0.08, 0.02, -0.04];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = M[i][0] * c[0] + M[i][1] * c[1] + M[i][2] * c[2] + B[i];
    }
    out
}

fn render(
    layout: &SceneLayout,
    tints: &[[f64; 3]],
    cam: &CameraModel,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Image {
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let r = &cam.extrinsics.r;
    let t = &cam.extrinsics.t;
    // Camera centre c = -Rᵀ t.
    let rt = crate::geometry::transpose(r);
    let c = crate::geometry::mat_vec(&rt, t);
    let center = [-c[0], -c[1], -c[2]];
    let noise_std = match cfg.domain {
        Domain::Target => cfg.image_noise,
        Domain::Source => 2.0 * cfg.image_noise,
    };
    let normal = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("positive std"));
    let mut raw = Vec::with_capacity(w * h * 3);
    let mut classes = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let d = scene::pixel_direction(&cam.intrinsics.k, r, col as f64 + 0.5, row as f64 + 0.5);
            let (class, mut color) = match layout.cast(&center, &d, RENDER_RANGE) {
                None => (GROUND_CLASS, SKY),
                Some(hit) => {
                    let class = layout.class_of(&hit);
                    let mut base = class_color(class);
                    if let Some(i) = hit.solid {
                        for (b, tv) in base.iter_mut().zip(&tints[i]) {
                            *b += tv;
                        }
                    }
                    let lambert =
                        (hit.normal[0] * LIGHT[0] + hit.normal[1] * LIGHT[1] + hit.normal[2] * LIGHT[2]).max(0.0);
                    let shade = 0.6 + 0.4 * lambert;
                    let haze = 1.0 - (-hit.t / 150.0).exp();
                    let mut col = [0.0; 3];
                    for k in 0..3 {
                        col[k] = (1.0 - haze) * base[k] * shade + haze * SKY[k];
                    }
                    (class, col)
                }
            };
            if cfg.domain == Domain::Source {
                color = source_color_transform(color);
            }
            for v in color.iter_mut() {
                let n = normal.as_ref().map_or(0.0, |d| d.sample(rng));
                *v = (*v + n).clamp(0.0, 1.0);
            }
            raw.extend_from_slice(&color);
            classes.push(class);
        }
    }
    Image {
        height: h as u32,
        width: w as u32,
        raw,
        classes,
    }
}
