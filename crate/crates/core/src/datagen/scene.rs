//! Procedural street-like scenes: a ground plane plus boxes and vertical
//! cylinders, sampled by a ring LiDAR and rendered by a pinhole camera.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{mat_vec, transpose, Vec3};

/// Solid primitive shapes used for object classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Box,
    Cylinder,
}

/// One placed object.
#[derive(Clone, Debug, PartialEq)]
pub enum Solid {
    /// Vertical cylinder with its axis through `(cx, cy)`.
    Cylinder {
        class: u16,
        cx: f64,
        cy: f64,
        radius: f64,
        z0: f64,
        z1: f64,
    },
    /// Box rotated by `yaw` about its vertical axis.
    Box {
        class: u16,
        cx: f64,
        cy: f64,
        half_len: f64,
        half_wid: f64,
        yaw: f64,
        z0: f64,
        z1: f64,
    },
}

impl Solid {
    pub fn class(&self) -> u16 {
        match self {
            Solid::Cylinder { class, .. } | Solid::Box { class, .. } => *class,
        }
    }

    /// Radius of a vertical cylinder enclosing the footprint.
    pub fn footprint_radius(&self) -> f64 {
        match self {
            Solid::Cylinder { radius, .. } => *radius,
            Solid::Box { half_len, half_wid, .. } => half_len.hypot(*half_wid),
        }
    }

    pub fn center_xy(&self) -> (f64, f64) {
        match self {
            Solid::Cylinder { cx, cy, .. } | Solid::Box { cx, cy, .. } => (*cx, *cy),
        }
    }
}

/// Geometry of a generated scene, in the LiDAR frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub ground_z: f64,
    pub solids: Vec<Solid>,
}

/// A ray hit: distance along the (unit) ray, outward normal and what was hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
    /// `None` for the ground plane, otherwise the index into `solids`.
    pub solid: Option<usize>,
}

const EPS: f64 = 1e-9;

fn ray_cylinder(o: &Vec3, d: &Vec3, cx: f64, cy: f64, r: f64, z0: f64, z1: f64) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3)> = None;
    let (ox, oy) = (o[0] - cx, o[1] - cy);
    let a = d[0] * d[0] + d[1] * d[1];
    if a > EPS {
        let b = 2.0 * (ox * d[0] + oy * d[1]);
        let c = ox * ox + oy * oy - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t > EPS {
                let z = o[2] + t * d[2];
                if z >= z0 && z <= z1 {
                    let (hx, hy) = (ox + t * d[0], oy + t * d[1]);
                    best = Some((t, [hx / r, hy / r, 0.0]));
                }
            }
        }
    }
    // Top cap only; the bottom rests on the ground.
    if d[2].abs() > EPS {
        let t = (z1 - o[2]) / d[2];
        if t > EPS && best.is_none_or(|(bt, _)| t < bt) {
            let (hx, hy) = (ox + t * d[0], oy + t * d[1]);
            if hx * hx + hy * hy <= r * r {
                best = Some((t, [0.0, 0.0, 1.0]));
            }
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn ray_box(o: &Vec3, d: &Vec3, cx: f64, cy: f64, hl: f64, hw: f64, yaw: f64, z0: f64, z1: f64) -> Option<(f64, Vec3)> {
    let (s, c) = yaw.sin_cos();
    // World → box frame: rotate by -yaw about the box centre.
    let to_local = |x: f64, y: f64| (c * x + s * y, -s * x + c * y);
    let (lox, loy) = to_local(o[0] - cx, o[1] - cy);
    let (ldx, ldy) = to_local(d[0], d[1]);
    let lo = [lox, loy, o[2]];
    let ld = [ldx, ldy, d[2]];
    let lo_b = [-hl, -hw, z0];
    let hi_b = [hl, hw, z1];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis_near = 0usize;
    let mut sign_near = -1.0;
    for ax in 0..3 {
        if ld[ax].abs() < EPS {
            if lo[ax] < lo_b[ax] || lo[ax] > hi_b[ax] {
                return None;
            }
            continue;
        }
        let t1 = (lo_b[ax] - lo[ax]) / ld[ax];
        let t2 = (hi_b[ax] - lo[ax]) / ld[ax];
        let (ta, tb, sgn) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if ta > t_near {
            t_near = ta;
            axis_near = ax;
            sign_near = sgn;
        }
        t_far = t_far.min(tb);
    }
    if t_near > t_far || t_near <= EPS {
        return None;
    }
    let mut ln = [0.0; 3];
    ln[axis_near] = sign_near;
    // Box frame → world for the normal.
    let normal = [c * ln[0] - s * ln[1], s * ln[0] + c * ln[1], ln[2]];
    Some((t_near, normal))
}

impl SceneLayout {
    /// First intersection of the ray `o + t·d` (unit `d`) with `t ≤ max_t`.
    pub fn cast(&self, o: &Vec3, d: &Vec3, max_t: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if d[2] < -EPS {
            let t = (self.ground_z - o[2]) / d[2];
            if t > EPS && t <= max_t {
                best = Some(Hit {
                    t,
                    normal: [0.0, 0.0, 1.0],
                    solid: None,
                });
            }
        }
        for (idx, s) in self.solids.iter().enumerate() {
            let hit = match *s {
                Solid::Cylinder {
                    cx, cy, radius, z0, z1, ..
                } => ray_cylinder(o, d, cx, cy, radius, z0, z1),
                Solid::Box {
                    cx,
                    cy,
                    half_len,
                    half_wid,
                    yaw,
                    z0,
                    z1,
                    ..
                } => ray_box(o, d, cx, cy, half_len, half_wid, yaw, z0, z1),
            };
            if let Some((t, normal)) = hit {
                if t <= max_t && best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        normal,
                        solid: Some(idx),
                    });
                }
            }
        }
        best
    }

    pub fn class_of(&self, hit: &Hit) -> u16 {
        hit.solid.map_or(0, |i| self.solids[i].class())
    }
}

/// Rejection-samples non-overlapping objects for every object class.
pub(crate) fn place_solids(
    rng: &mut ChaCha8Rng,
    classes: &[super::ObjectClass],
    ground_z: f64,
    min_radius: f64,
    max_radius: f64,
) -> Vec<Solid> {
    let mut solids: Vec<Solid> = Vec::new();
    for (ci, oc) in classes.iter().enumerate() {
        let class = (ci + 1) as u16;
        let count = if oc.count.0 >= oc.count.1 {
            oc.count.0
        } else {
            rng.random_range(oc.count.0..=oc.count.1)
        };
        for _ in 0..count {
            for _attempt in 0..50 {
                let dist = rng.random_range(min_radius..max_radius);
                let ang = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let (cx, cy) = (dist * ang.cos(), dist * ang.sin());
                let height = sample(rng, oc.height);
                let cand = match oc.shape {
                    ShapeKind::Cylinder => Solid::Cylinder {
                        class,
                        cx,
                        cy,
                        radius: 0.5 * sample(rng, oc.length),
                        z0: ground_z,
                        z1: ground_z + height,
                    },
                    ShapeKind::Box => Solid::Box {
                        class,
                        cx,
                        cy,
                        half_len: 0.5 * sample(rng, oc.length),
                        half_wid: 0.5 * sample(rng, oc.width),
                        yaw: rng.random_range(0.0..std::f64::consts::PI),
                        z0: ground_z,
                        z1: ground_z + height,
                    },
                };
                let r = cand.footprint_radius();
                if dist - r < min_radius * 0.5 {
                    continue;
                }
                let clear = solids.iter().all(|s| {
                    let (sx, sy) = s.center_xy();
                    (sx - cx).hypot(sy - cy) > s.footprint_radius() + r + 0.5
                });
                if clear {
                    solids.push(cand);
                    break;
                }
            }
        }
    }
    solids
}

fn sample(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Direction of a LiDAR beam at the given azimuth and elevation (radians).
pub fn beam_direction(azimuth: f64, elevation: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Unit direction, in the LiDAR frame, of the camera ray through the centre
/// of pixel `(col, row)`.
pub fn pixel_direction(k: &crate::geometry::Mat3, r: &crate::geometry::Mat3, col: f64, row: f64) -> Vec3 {
    // Inverse of an upper-triangular pinhole K.
    let fx = k[0][0];
    let fy = k[1][1];
    let skew = k[0][1];
    let y = (row - k[1][2]) / fy;
    let x = (col - k[0][2] - skew * y) / fx;
    let d = mat_vec(&transpose(r), &[x, y, 1.0]);
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [d[0] / n, d[1] / n, d[2] / n]
}
