//! Pinhole projection of LiDAR points into a camera image.
//!
//! Points are mapped with `x_rec = K [R | t] x_hom`; the pixel is
//! `(k, l) = (⌊x_rec₀ / x_rec₂⌋, ⌊x_rec₁ / x_rec₂⌋)` with `k` the column and
//! `l` the row. A correspondence is valid when the depth `x_rec₂` is
//! positive and the pixel lies in the half-open box `[0, W) × [0, H)`.

use thiserror::Error;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Depths below this are treated as lying on the camera plane.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant 1 (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("intrinsics need positive focal lengths, got fx={0}, fy={1}")]
    BadFocal(f64, f64),
    #[error("image extent must be positive, got {0}x{1}")]
    EmptyImage(u32, u32),
    #[error("non-finite camera parameter")]
    NonFinite,
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|p| a[i][p] * b[p][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation by `angle` radians about the vertical (z) axis.
pub fn yaw_rotation(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Image-plane projection `K` together with the image extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Intrinsics {
    pub k: Mat3,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(k: Mat3, width: u32, height: u32) -> Result<Self, GeometryError> {
        if k.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(GeometryError::BadFocal(k[0][0], k[1][1]));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage(width, height));
        }
        Ok(Self { k, width, height })
    }

    /// Square-pixel camera with the principal point at the image centre and
    /// the given horizontal field of view.
    pub fn from_hfov(width: u32, height: u32, hfov_deg: f64) -> Result<Self, GeometryError> {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        let k = [
            [f, 0.0, 0.5 * width as f64],
            [0.0, f, 0.5 * height as f64],
            [0.0, 0.0, 1.0],
        ];
        Self::new(k, width, height)
    }
}

/// Rigid LiDAR-to-camera transform `[R | t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Extrinsics {
    pub r: Mat3,
    pub t: Vec3,
}

impl Extrinsics {
    pub fn new(r: Mat3, t: Vec3) -> Result<Self, GeometryError> {
        if r.iter().flatten().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let rrt = mat_mul(&r, &transpose(&r));
        let ident = identity();
        let mut dev: f64 = (det(&r) - 1.0).abs();
        for i in 0..3 {
            for j in 0..3 {
                dev = dev.max((rrt[i][j] - ident[i][j]).abs());
            }
        }
        if dev > 1e-9 {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(Self { r, t })
    }

    /// Forward-looking camera placed at `center` (LiDAR frame) and turned by
    /// `yaw` about the vertical axis. Camera axes: x right, y down, z forward.
    pub fn forward_camera(center: Vec3, yaw: f64) -> Self {
        // LiDAR x forward, y left, z up.
        let base: Mat3 = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let r = mat_mul(&base, &transpose(&yaw_rotation(yaw)));
        let rc = mat_vec(&r, &center);
        Self {
            r,
            t: [-rc[0], -rc[1], -rc[2]],
        }
    }

    /// Extrinsics matching a cloud that was rotated by `rot` about the LiDAR
    /// origin, so that projections of rotated points are unchanged.
    pub fn after_rotating_cloud(&self, rot: &Mat3) -> Self {
        Self {
            r: mat_mul(&self.r, &transpose(rot)),
            t: self.t,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let q = mat_vec(&self.r, p);
        [q[0] + self.t[0], q[1] + self.t[1], q[2] + self.t[2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, extrinsics: Extrinsics) -> Self {
        Self { intrinsics, extrinsics }
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }
}

/// LiDAR points in metres, sensor frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rotated(&self, rot: &Mat3) -> Self {
        Self {
            points: self.points.iter().map(|p| mat_vec(rot, p)).collect(),
        }
    }
}

/// Projection outcome for one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMatch {
    pub valid: bool,
    /// Column.
    pub k: i64,
    /// Row.
    pub l: i64,
    pub depth: f64,
}

impl PixelMatch {
    /// Linear index into an `H × W` row-major image; `None` when invalid.
    pub fn pixel_index(&self, width: u32) -> Option<usize> {
        self.valid.then(|| self.l as usize * width as usize + self.k as usize)
    }
}

/// Per-point correspondences of a whole cloud.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Correspondence {
    pub matches: Vec<PixelMatch>,
    pub width: u32,
    pub height: u32,
}

impl Correspondence {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn valid_flags(&self) -> Vec<bool> {
        self.matches.iter().map(|m| m.valid).collect()
    }
}

/// Projects one point; shared by [`project`] and [`fov_mask`].
pub fn project_point(p: &Vec3, intr: &Intrinsics, extr: &Extrinsics) -> PixelMatch {
    let rec = mat_vec(&intr.k, &extr.apply(p));
    let depth = rec[2];
    let invalid = PixelMatch {
        valid: false,
        k: -1,
        l: -1,
        depth,
    };
    if depth.abs() < MIN_DEPTH || depth <= 0.0 {
        return invalid;
    }
    let (u, v) = (rec[0] / depth, rec[1] / depth);
    if !(u.is_finite() && v.is_finite()) {
        return invalid;
    }
    let (fk, fl) = (u.floor(), v.floor());
    let inside = fk >= 0.0 && fl >= 0.0 && fk < intr.width as f64 && fl < intr.height as f64;
    if !inside {
        return PixelMatch {
            valid: false,
            k: fk.clamp(-1.0, i64::MAX as f64) as i64,
            l: fl.clamp(-1.0, i64::MAX as f64) as i64,
            depth,
        };
    }
    PixelMatch {
        valid: true,
        k: fk as i64,
        l: fl as i64,
        depth,
    }
}

pub fn project(points: &PointCloud, cam: &CameraModel) -> Correspondence {
    Correspondence {
        matches: points
            .points
            .iter()
            .map(|p| project_point(p, &cam.intrinsics, &cam.extrinsics))
            .collect(),
        width: cam.width(),
        height: cam.height(),
    }
}

/// Splits point indices into those with a valid pixel (`I`) and the rest (`O`).
pub fn partition(corr: &Correspondence) -> (Vec<usize>, Vec<usize>) {
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (i, m) in corr.matches.iter().enumerate() {
        if m.valid {
            inside.push(i);
        } else {
            outside.push(i);
        }
    }
    (inside, outside)
}

/// Indicator of the points that fall inside the image under `(intr, extr)`.
pub fn fov_mask(points: &PointCloud, intr: &Intrinsics, extr: &Extrinsics) -> Vec<bool> {
    points
        .points
        .iter()
        .map(|p| project_point(p, intr, extr).valid)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_camera(w: u32, h: u32) -> CameraModel {
        CameraModel::new(
            Intrinsics::new(identity(), w, h).unwrap(),
            Extrinsics::new(identity(), [0.0; 3]).unwrap(),
        )
    }

    #[test]
    fn identity_projection() {
        let cam = unit_camera(4, 4);
        let c = project(&PointCloud::new(vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), &cam);
        assert_eq!(
            c.matches[0],
            PixelMatch {
                valid: true,
                k: 0,
                l: 0,
                depth: 1.0
            }
        );
        assert!(!c.matches[1].valid);
    }

    #[test]
    fn floor_rule_by_hand() {
        let cam = unit_camera(4, 4);
        let m = project(&PointCloud::new(vec![[2.5, 1.2, 2.0]]), &cam).matches[0];
        assert!(m.valid);
        assert_eq!((m.k, m.l), (1, 0));
    }

    #[test]
    fn far_border_is_excluded() {
        let cam = unit_camera(4, 4);
        let c = project(
            &PointCloud::new(vec![[4.0, 0.0, 1.0], [3.999, 3.999, 1.0], [0.0, 4.0, 1.0]]),
            &cam,
        );
        assert_eq!(c.valid_flags(), vec![false, true, false]);
    }

    #[test]
    fn camera_plane_is_invalid() {
        let cam = unit_camera(4, 4);
        let c = project(&PointCloud::new(vec![[1.0, 1.0, 0.0], [1.0, 1.0, 1e-12]]), &cam);
        assert!(c.matches.iter().all(|m| !m.valid));
    }

    #[test]
    fn partition_extremes() {
        let cam = unit_camera(4, 4);
        let behind = PointCloud::new(vec![[0.0, 0.0, -1.0]; 5]);
        let (i, o) = partition(&project(&behind, &cam));
        assert!(i.is_empty());
        assert_eq!(o, vec![0, 1, 2, 3, 4]);
        let front = PointCloud::new(vec![[0.0, 0.0, 1.0]; 3]);
        let (i, o) = partition(&project(&front, &cam));
        assert_eq!(i.len(), 3);
        assert!(o.is_empty());
    }

    #[test]
    fn fov_mask_empty_cloud() {
        let cam = unit_camera(4, 4);
        assert!(fov_mask(&PointCloud::default(), &cam.intrinsics, &cam.extrinsics).is_empty());
    }

    #[test]
    fn rejects_bad_cameras() {
        assert!(matches!(
            Intrinsics::new(identity(), 0, 3),
            Err(GeometryError::EmptyImage(0, 3))
        ));
        let mut k = identity();
        k[1][1] = -1.0;
        assert!(Intrinsics::new(k, 2, 2).is_err());
        let mut r = identity();
        r[0][0] = -1.0;
        assert!(matches!(
            Extrinsics::new(r, [0.0; 3]),
            Err(GeometryError::NotARotation(_))
        ));
    }

    #[test]
    fn forward_camera_sees_ahead() {
        let intr = Intrinsics::from_hfov(64, 24, 90.0).unwrap();
        let extr = Extrinsics::forward_camera([0.2, 0.0, -0.1], 0.0);
        assert!(Extrinsics::new(extr.r, extr.t).is_ok());
        let ahead = project_point(&[10.0, 0.0, -0.1], &intr, &extr);
        assert!(ahead.valid);
        assert_eq!((ahead.k, ahead.l), (32, 12));
        assert!(!project_point(&[-10.0, 0.0, 0.0], &intr, &extr).valid);
        assert!(!project_point(&[0.0, 10.0, 0.0], &intr, &extr).valid);
    }

    #[test]
    fn rotated_cloud_keeps_correspondences() {
        let intr = Intrinsics::from_hfov(64, 24, 90.0).unwrap();
        let extr = Extrinsics::forward_camera([0.2, 0.0, -0.1], 0.3);
        let cloud = PointCloud::new(vec![[8.0, 1.0, -0.5], [3.0, 4.0, 0.2], [-2.0, 1.0, 0.0]]);
        let rot = yaw_rotation(1.1);
        let extr2 = extr.after_rotating_cloud(&rot);
        let a = fov_mask(&cloud, &intr, &extr);
        let b = fov_mask(&cloud.rotated(&rot), &intr, &extr2);
        assert_eq!(a, b);
    }
}
