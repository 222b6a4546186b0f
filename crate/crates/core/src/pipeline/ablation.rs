//! Component ablation: one student per toggle row and seed, scored on the
//! evaluation split against a densely supervised reference.

use std::fmt::Write as _;

use crate::error::Result;
use crate::ig2d::GuideModel;
use crate::metrics::EvalReport;

use super::config::{RunConfig, Supervision, Toggles};
use super::data::Dataset;
use super::train::{train_student, EvalSet};

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    /// `None` for the dense reference row.
    pub toggles: Option<Toggles>,
    /// One report per seed.
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn mious(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.miou).collect()
    }

    pub fn mean_miou(&self) -> f64 {
        mean(self.mious().into_iter()).unwrap_or(0.0)
    }

    /// Mean of a per-report rate over the seeds that define it.
    pub fn mean_of(&self, f: impl Fn(&EvalReport) -> Option<f64>) -> Option<f64> {
        mean(self.reports.iter().filter_map(f))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub reference: AblationRow,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn reference_miou(&self) -> f64 {
        self.reference.mean_miou()
    }

    /// mIoU per row with the mean relative score against the reference.
    pub fn to_table(&self) -> String {
        let reference = self.reference_miou();
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>8} {:>8}  per-seed mIoU", "components", "mIoU", "rel");
        for row in std::iter::once(&self.reference).chain(&self.rows) {
            let m = row.mean_miou();
            let rel = if reference > 0.0 { m / reference } else { f64::NAN };
            let seeds: Vec<String> = row.mious().iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "{:<18} {:>8.4} {:>8.3}  {}", row.label, m, rel, seeds.join(" "));
        }
        s
    }

    /// Accuracy on the border, object size and range subsets for every row.
    pub fn to_split_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "components", "border", "inner", "small", "large", "0-25m", "25m+"
        );
        for row in std::iter::once(&self.reference).chain(&self.rows) {
            let _ = writeln!(
                s,
                "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                row.label,
                cell(row.mean_of(|r| r.border_acc)),
                cell(row.mean_of(|r| r.non_border_acc)),
                cell(row.mean_of(|r| r.small_obj_acc)),
                cell(row.mean_of(|r| r.large_obj_acc)),
                cell(row.mean_of(|r| r.near_acc)),
                cell(row.mean_of(|r| r.far_acc)),
            );
        }
        s
    }
}

/// Trains every row of `rows` plus a dense reference once per seed.
///
/// Rows of the same seed share initialisation and batch order, so their
/// differences come from the enabled components only. `progress` receives
/// each finished (row label, seed, report).
pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    guide: Option<&GuideModel>,
    rows: &[Toggles],
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &EvalReport),
) -> Result<AblationReport> {
    let eval = EvalSet::new(&data.eval, data.num_classes(), data.scene.small_classes())?;
    let dense = Dataset {
        train: data.train.iter().cloned().map(|f| f.densely_labeled()).collect(),
        source: Vec::new(),
        eval: Vec::new(),
        scene: data.scene.clone(),
    };
    let mut reference = AblationRow {
        label: "dense".into(),
        toggles: None,
        reports: Vec::new(),
    };
    let mut out: Vec<AblationRow> = rows
        .iter()
        .map(|t| AblationRow {
            label: t.label(),
            toggles: Some(*t),
            reports: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let cfg = RunConfig {
            seed,
            supervision: Supervision::Dense,
            toggles: Toggles::BASELINE,
            ..base.clone()
        };
        let ckpt = train_student(&cfg, &dense, None)?;
        let rep = eval.evaluate(&ckpt, None)?;
        progress(&reference.label, seed, &rep);
        reference.reports.push(rep);
    }
    let ref_miou = reference.mean_miou();
    for row in &mut out {
        for &seed in seeds {
            let cfg = RunConfig {
                seed,
                toggles: row.toggles.expect("component row"),
                ..base.clone()
            };
            let ckpt = train_student(&cfg, data, guide)?;
            let rep = eval.evaluate(&ckpt, Some(ref_miou))?;
            progress(&row.label, seed, &rep);
            row.reports.push(rep);
        }
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        reference,
        rows: out,
    })
}
