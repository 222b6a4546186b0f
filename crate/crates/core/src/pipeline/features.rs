//! Hand-made per-point inputs for the student: height, range and simple
//! statistics of the vertical column of points around each point.

use std::collections::HashMap;

use crate::geometry::PointCloud;
use crate::numerics::Array;

/// Horizontal radii (metres) of the two neighbourhoods.
const RADII: [f64; 2] = [0.75, 2.5];
/// Statistics per neighbourhood.
const PER_RADIUS: usize = 5;

/// Width of the feature rows produced by [`point_features`].
pub const POINT_FEATURES: usize = 2 + RADII.len() * PER_RADIUS;

struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(cloud: &PointCloud, cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in cloud.points.iter().enumerate() {
            cells.entry(Self::key(p[0], p[1], cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(x: f64, y: f64, cell: f64) -> (i64, i64) {
        ((x / cell).floor() as i64, (y / cell).floor() as i64)
    }

    /// Calls `f` on every point within horizontal distance `r ≤ cell`,
    /// in ascending cell then insertion order.
    fn for_each_near(&self, x: f64, y: f64, r: f64, cloud: &PointCloud, mut f: impl FnMut(usize)) {
        let (cx, cy) = Self::key(x, y, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(v) = self.cells.get(&(cx + dx, cy + dy)) {
                    for &j in v {
                        let q = &cloud.points[j];
                        if (q[0] - x).powi(2) + (q[1] - y).powi(2) <= r * r {
                            f(j);
                        }
                    }
                }
            }
        }
    }
}

/// `N × POINT_FEATURES` inputs: scaled height and horizontal range, then
/// for each radius the height above the lowest neighbour, the height below
/// the highest, the log neighbour count, and the horizontal and vertical
/// spread.
pub fn point_features(cloud: &PointCloud) -> Array {
    let n = cloud.len();
    let grid = Grid::new(cloud, RADII[RADII.len() - 1]);
    let mut data = Vec::with_capacity(n * POINT_FEATURES);
    for p in &cloud.points {
        data.push(p[2] / 2.0);
        data.push(p[0].hypot(p[1]) / 25.0);
        for &r in &RADII {
            let (mut lo, mut hi) = (p[2], p[2]);
            let (mut cnt, mut sx, mut sy, mut sz, mut sxx, mut syy, mut szz) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            grid.for_each_near(p[0], p[1], r, cloud, |j| {
                let q = &cloud.points[j];
                lo = lo.min(q[2]);
                hi = hi.max(q[2]);
                let (dx, dy, dz) = (q[0] - p[0], q[1] - p[1], q[2] - p[2]);
                cnt += 1.0;
                sx += dx;
                sy += dy;
                sz += dz;
                sxx += dx * dx;
                syy += dy * dy;
                szz += dz * dz;
            });
            let var = |s: f64, ss: f64| (ss / cnt - (s / cnt).powi(2)).max(0.0);
            data.push(p[2] - lo);
            data.push(hi - p[2]);
            data.push(cnt.ln() / 4.0);
            data.push((var(sx, sxx) + var(sy, syy)).sqrt() / r);
            data.push(var(sz, szz).sqrt());
        }
    }
    Array::matrix(n, POINT_FEATURES, data).expect("feature shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_point_has_trivial_neighbourhood() {
        let cloud = PointCloud::new(vec![[3.0, 4.0, -1.0], [30.0, 0.0, 0.0]]);
        let f = point_features(&cloud);
        assert_eq!(f.shape(), [2, POINT_FEATURES]);
        let r = f.row(0);
        assert_eq!(r[0], -0.5);
        assert_eq!(r[1], 5.0 / 25.0);
        assert_eq!(&r[2..7], &[0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn column_statistics() {
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.5, 0.0, -1.0],
            [2.0, 0.0, 3.0],
        ]);
        let f = point_features(&cloud);
        let r = f.row(0);
        // Small radius sees points 0, 1, 2.
        assert_eq!(r[2], 1.0);
        assert_eq!(r[3], 1.0);
        assert!((r[4] - 3f64.ln() / 4.0).abs() < 1e-15);
        // Large radius also sees point 3.
        assert_eq!(r[8], 3.0);
        assert!((r[9] - 4f64.ln() / 4.0).abs() < 1e-15);
    }
}
