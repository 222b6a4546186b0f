//! Point-wise segmentation metrics and evaluation reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

/// Neighbourhood size of the border rule.
pub const BORDER_NEIGHBORS: usize = 16;
/// Horizontal range separating near from far points (metres).
pub const NEAR_RANGE: f64 = 25.0;

/// `confusion[t][p]` counts points of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, pred: &[u16], truth: &[u16]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::InvalidInput(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let c = self.num_classes();
        for (&p, &t) in pred.iter().zip(truth) {
            if p as usize >= c || t as usize >= c {
                return Err(Error::InvalidInput(format!("class id out of range ({t} / {p})")));
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// `TP / (TP + FP + FN)` per class; `None` when a class is absent from
    /// both truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes();
        (0..c)
            .map(|k| {
                let tp = self.counts[k][k];
                let fn_: u64 = self.counts[k].iter().sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| self.counts[t][k]).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total: u64 = self.counts.iter().flatten().sum();
        let correct: u64 = (0..self.num_classes()).map(|k| self.counts[k][k]).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }

    pub fn truth_counts(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Confusion matrix and mIoU of a single prediction vector.
pub fn confusion_and_miou(pred: &[u16], truth: &[u16], num_classes: usize) -> Result<(Confusion, f64)> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, truth)?;
    let m = c.miou();
    Ok((c, m))
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Flags points that have at least one of their 16 nearest neighbours (3-D
/// Euclidean, ties broken by lower index) in a different class.
pub fn border_split(cloud: &PointCloud, labels: &[u16]) -> Result<Vec<bool>> {
    let n = cloud.len();
    if n <= BORDER_NEIGHBORS {
        return Err(Error::InvalidInput(format!(
            "border rule needs at least {} points, got {n}",
            BORDER_NEIGHBORS + 1
        )));
    }
    if labels.len() != n {
        return Err(Error::InvalidInput(format!("{} labels for {n} points", labels.len())));
    }
    let pts = &cloud.points;
    let mut buf: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for i in 0..n {
        buf.clear();
        buf.extend((0..n).filter(|&j| j != i).map(|j| (dist2(&pts[i], &pts[j]), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        buf.select_nth_unstable_by(BORDER_NEIGHBORS - 1, cmp);
        let li = labels[i];
        flags.push(buf[..BORDER_NEIGHBORS].iter().any(|&(_, j)| labels[j] != li));
    }
    Ok(flags)
}

/// Near flags: horizontal distance from the sensor below 25 m.
pub fn range_split(cloud: &PointCloud) -> Vec<bool> {
    cloud.points.iter().map(|p| p[0].hypot(p[1]) < NEAR_RANGE).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Tally {
    correct: u64,
    total: u64,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as u64;
    }

    fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Accumulates per-frame predictions into an [`EvalReport`].
#[derive(Clone, Debug)]
pub struct Evaluator {
    confusion: Confusion,
    small_classes: Vec<bool>,
    border: Tally,
    non_border: Tally,
    small: Tally,
    large: Tally,
    near: Tally,
    far: Tally,
}

impl Evaluator {
    /// `small_classes[c]` marks small object classes; class 0 is background
    /// and counts as neither small nor large.
    pub fn new(num_classes: usize, small_classes: Vec<bool>) -> Self {
        Self {
            confusion: Confusion::new(num_classes),
            small_classes,
            border: Tally::default(),
            non_border: Tally::default(),
            small: Tally::default(),
            large: Tally::default(),
            near: Tally::default(),
            far: Tally::default(),
        }
    }

    pub fn add_frame(&mut self, cloud: &PointCloud, pred: &[u16], truth: &[u16]) -> Result<()> {
        let border = border_split(cloud, truth)?;
        self.add_frame_with_border(cloud, pred, truth, &border)
    }

    /// Like [`Evaluator::add_frame`] with border flags computed beforehand.
    pub fn add_frame_with_border(
        &mut self,
        cloud: &PointCloud,
        pred: &[u16],
        truth: &[u16],
        border: &[bool],
    ) -> Result<()> {
        if border.len() != truth.len() || cloud.len() != truth.len() {
            return Err(Error::InvalidInput(format!(
                "frame sizes differ: {} points, {} labels, {} border flags",
                cloud.len(),
                truth.len(),
                border.len()
            )));
        }
        self.confusion.add(pred, truth)?;
        let near = range_split(cloud);
        for i in 0..truth.len() {
            let ok = pred[i] == truth[i];
            if border[i] {
                self.border.add(ok);
            } else {
                self.non_border.add(ok);
            }
            if near[i] {
                self.near.add(ok);
            } else {
                self.far.add(ok);
            }
            let t = truth[i] as usize;
            if t > 0 {
                if self.small_classes.get(t).copied().unwrap_or(false) {
                    self.small.add(ok);
                } else {
                    self.large.add(ok);
                }
            }
        }
        Ok(())
    }

    /// Finishes the report; `reference_miou` is the fully supervised score
    /// used for the relative column.
    pub fn finish(self, reference_miou: Option<f64>) -> EvalReport {
        let miou = self.confusion.miou();
        EvalReport {
            per_class_iou: self.confusion.per_class_iou(),
            miou,
            rel_miou: reference_miou.filter(|r| *r > 0.0).map(|r| miou / r),
            accuracy: self.confusion.accuracy(),
            border_acc: self.border.rate(),
            non_border_acc: self.non_border.rate(),
            small_obj_acc: self.small.rate(),
            large_obj_acc: self.large.rate(),
            near_acc: self.near.rate(),
            far_acc: self.far.rate(),
            border_points: self.border.total,
            near_points: self.near.total,
            confusion: self.confusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub rel_miou: Option<f64>,
    pub accuracy: Option<f64>,
    pub border_acc: Option<f64>,
    pub non_border_acc: Option<f64>,
    pub small_obj_acc: Option<f64>,
    pub large_obj_acc: Option<f64>,
    pub near_acc: Option<f64>,
    pub far_acc: Option<f64>,
    pub border_points: u64,
    pub near_points: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// Machine-readable `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "miou = {:.6}", self.miou);
        let _ = writeln!(s, "rel_miou = {}", fmt_opt(self.rel_miou));
        let _ = writeln!(s, "accuracy = {}", fmt_opt(self.accuracy));
        for (c, v) in self.per_class_iou.iter().enumerate() {
            let _ = writeln!(s, "iou.{c} = {}", fmt_opt(*v));
        }
        let _ = writeln!(s, "border_acc = {}", fmt_opt(self.border_acc));
        let _ = writeln!(s, "non_border_acc = {}", fmt_opt(self.non_border_acc));
        let _ = writeln!(s, "small_obj_acc = {}", fmt_opt(self.small_obj_acc));
        let _ = writeln!(s, "large_obj_acc = {}", fmt_opt(self.large_obj_acc));
        let _ = writeln!(s, "near_acc = {}", fmt_opt(self.near_acc));
        let _ = writeln!(s, "far_acc = {}", fmt_opt(self.far_acc));
        for (t, row) in self.confusion.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "confusion.{t} = {}", cells.join(","));
        }
        s
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "    -".to_string(), |x| format!("{:5.1}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>8}", "metric", "value");
        let _ = writeln!(s, "{:<16}{:>8}", "mIoU", pct(Some(self.miou)));
        let _ = writeln!(s, "{:<16}{:>8}", "rel mIoU", pct(self.rel_miou));
        let _ = writeln!(s, "{:<16}{:>8}", "accuracy", pct(self.accuracy));
        for (c, v) in self.per_class_iou.iter().enumerate() {
            let _ = writeln!(s, "{:<16}{:>8}", format!("IoU class {c}"), pct(*v));
        }
        let _ = writeln!(s, "{:<16}{:>8}", "border", pct(self.border_acc));
        let _ = writeln!(s, "{:<16}{:>8}", "non-border", pct(self.non_border_acc));
        let _ = writeln!(s, "{:<16}{:>8}", "small objects", pct(self.small_obj_acc));
        let _ = writeln!(s, "{:<16}{:>8}", "large objects", pct(self.large_obj_acc));
        let _ = writeln!(s, "{:<16}{:>8}", "0-25m", pct(self.near_acc));
        let _ = writeln!(s, "{:<16}{:>8}", "25m+", pct(self.far_acc));
        s
    }
}

/// Bird's-eye raster (binary PPM) with truth on the left and prediction on
/// the right; `extent` is the half-width of the square view in metres.
pub fn bev_ppm(cloud: &PointCloud, pred: &[u16], truth: &[u16], size: usize, extent: f64) -> Vec<u8> {
    let palette = |c: u16| -> [u8; 3] {
        let col = crate::datagen::class_color(c);
        [(col[0] * 255.0) as u8, (col[1] * 255.0) as u8, (col[2] * 255.0) as u8]
    };
    let w = 2 * size;
    let mut px = vec![0u8; w * size * 3];
    for (i, p) in cloud.points.iter().enumerate() {
        // x forward is up, y left is left.
        let u = ((extent - p[1]) / (2.0 * extent) * size as f64).floor();
        let v = ((extent - p[0]) / (2.0 * extent) * size as f64).floor();
        if u < 0.0 || v < 0.0 || u >= size as f64 || v >= size as f64 {
            continue;
        }
        let (u, v) = (u as usize, v as usize);
        for (offset, class) in [(0, truth[i]), (size, pred[i])] {
            let at = 3 * (v * w + u + offset);
            px[at..at + 3].copy_from_slice(&palette(class));
        }
    }
    let mut out = format!("P6\n{w} {size}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_half() {
        let t = [0, 1, 1, 0];
        let (_, m) = confusion_and_miou(&t, &t, 2).unwrap();
        assert_eq!(m, 1.0);
        let (c, m) = confusion_and_miou(&[0, 0, 0, 0], &t, 2).unwrap();
        assert_eq!(c.per_class_iou(), vec![Some(0.5), Some(0.0)]);
        assert_eq!(m, 0.25);
        assert_eq!(c.truth_counts(), vec![2, 2]);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let (c, m) = confusion_and_miou(&[0, 1], &[0, 1], 4).unwrap();
        assert_eq!(c.per_class_iou()[3], None);
        assert_eq!(m, 1.0);
        assert!(confusion_and_miou(&[0], &[0, 1], 2).is_err());
        assert!(confusion_and_miou(&[5], &[0], 2).is_err());
    }

    fn cluster(center: Vec3, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|i| {
                [
                    center[0] + 0.01 * i as f64,
                    center[1],
                    center[2] + 0.003 * (i % 3) as f64,
                ]
            })
            .collect()
    }

    #[test]
    fn single_class_and_separated_clusters_have_no_border() {
        let cloud = PointCloud::new(cluster([0.0; 3], 20));
        assert!(border_split(&cloud, &[2; 20]).unwrap().iter().all(|&b| !b));
        let mut pts = cluster([0.0; 3], 17);
        pts.extend(cluster([100.0, 0.0, 0.0], 17));
        let labels: Vec<u16> = (0..34).map(|i| (i >= 17) as u16).collect();
        let flags = border_split(&PointCloud::new(pts), &labels).unwrap();
        assert!(flags.iter().all(|&b| !b));
    }

    #[test]
    fn border_needs_seventeen_points() {
        let cloud = PointCloud::new(cluster([0.0; 3], 16));
        assert!(border_split(&cloud, &[0; 16]).is_err());
    }

    #[test]
    fn range_boundary_is_half_open() {
        let cloud = PointCloud::new(vec![[0.0; 3], [25.0, 0.0, 0.0], [0.0, 24.999, 5.0], [15.0, 20.0, -1.0]]);
        assert_eq!(range_split(&cloud), vec![true, false, true, false]);
    }

    #[test]
    fn report_formats() {
        let mut pts = cluster([0.0; 3], 17);
        pts.extend(cluster([40.0, 0.0, 0.0], 17));
        let cloud = PointCloud::new(pts);
        let truth: Vec<u16> = (0..34).map(|i| if i < 17 { 0 } else { 1 }).collect();
        let mut ev = Evaluator::new(2, vec![false, true]);
        ev.add_frame(&cloud, &truth, &truth).unwrap();
        let r = ev.finish(Some(0.5));
        assert_eq!(r.rel_miou, Some(2.0));
        assert_eq!(r.small_obj_acc, Some(1.0));
        assert_eq!(r.large_obj_acc, None);
        assert_eq!(r.near_points, 17);
        assert!(r.to_key_value().contains("miou = 1.000000"));
        assert!(r.to_table().contains("25m+"));
        let ppm = bev_ppm(&cloud, &truth, &truth, 32, 50.0);
        assert!(ppm.starts_with(b"P6\n64 32\n255\n"));
        assert_eq!(ppm.len(), 13 + 64 * 32 * 3);
    }
}
