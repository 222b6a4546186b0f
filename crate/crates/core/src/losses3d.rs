//! Loss terms of the 3D stage, recorded on a [`Tape`].
//!
//! Points of a batch are concatenated row-wise, so every per-point mask or
//! index set refers to rows of the stacked prediction.

use crate::error::{Error, Result};
use crate::numerics::{Array, Tape, Var};

/// Student outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `N × C` class scores.
    pub logits: Var,
    /// `N × d` auxiliary-head features.
    pub aux: Var,
}

impl Prediction {
    /// Splits a joint `N × (C + d)` network output into its two heads.
    pub fn split(tape: &mut Tape, out: Var, num_classes: usize) -> Result<Self> {
        let width = tape.value(out).cols();
        Ok(Self {
            logits: tape.slice_cols(out, 0, num_classes)?,
            aux: tape.slice_cols(out, num_classes, width)?,
        })
    }
}

/// Frozen guide features at the in-image points plus the teacher's class
/// assignment for every point.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceTargets {
    /// Row indices of points with a valid pixel correspondence (the set I).
    pub in_image: Vec<usize>,
    /// `|I| × d` guide features, row `j` belonging to `in_image[j]`.
    pub features: Array,
    /// Teacher argmax for every point.
    pub teacher_classes: Vec<u16>,
}

impl GuidanceTargets {
    /// Complement of `in_image` among `n` points, ascending.
    pub fn out_of_image(&self, n: usize) -> Vec<usize> {
        let mut inside = vec![false; n];
        for &i in &self.in_image {
            inside[i] = true;
        }
        (0..n).filter(|&i| !inside[i]).collect()
    }
}

fn constant_zero(tape: &mut Tape) -> Var {
    tape.constant(Array::scalar(0.0))
}

/// Mean cross-entropy over weak-labeled points; 0 when none are labeled.
pub fn supervised_ce(tape: &mut Tape, logits: Var, labels: &[u16], weak_mask: &[bool]) -> Result<Var> {
    let n = tape.value(logits).rows();
    check_len("labels", labels.len(), n)?;
    check_len("weak mask", weak_mask.len(), n)?;
    let idx: Vec<usize> = (0..n).filter(|&i| weak_mask[i]).collect();
    if idx.is_empty() {
        return Ok(constant_zero(tape));
    }
    let targets: Vec<usize> = idx.iter().map(|&i| labels[i] as usize).collect();
    let m = idx.len();
    let rows = tape.gather_rows(logits, idx)?;
    let ls = tape.log_softmax(rows);
    let picked = tape.pick_cols(ls, targets)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / m as f64))
}

/// Row-wise `KL(softmax(a) ‖ softmax(b))` summed over the rows of `a`,
/// where `b` is a detached target.
fn kl_rows_sum(tape: &mut Tape, a: Var, target: Array) -> Result<Var> {
    let log_q = tape.constant(crate::numerics::log_softmax_rows(&target));
    let log_p = tape.log_softmax(a);
    let p = tape.softmax(a);
    let diff = tape.sub(log_p, log_q)?;
    let prod = tape.mul(p, diff)?;
    Ok(tape.sum(prod))
}

/// Mean over unlabeled points of `KL(softmax(student) ‖ softmax(teacher))`.
pub fn mt_consistency(tape: &mut Tape, logits: Var, teacher_logits: &Array, weak_mask: &[bool]) -> Result<Var> {
    let n = tape.value(logits).rows();
    check_len("weak mask", weak_mask.len(), n)?;
    if teacher_logits.shape() != tape.value(logits).shape() {
        return Err(Error::InvalidInput(format!(
            "teacher logits {:?} vs student {:?}",
            teacher_logits.shape(),
            tape.value(logits).shape()
        )));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| !weak_mask[i]).collect();
    if idx.is_empty() {
        return Ok(constant_zero(tape));
    }
    let m = idx.len();
    let target = teacher_logits.gather_rows(&idx);
    let rows = tape.gather_rows(logits, idx)?;
    let s = kl_rows_sum(tape, rows, target)?;
    Ok(tape.scale(s, 1.0 / m as f64))
}

/// A loss node plus whether its index set was empty (value forced to 0).
#[derive(Clone, Copy, Debug)]
pub struct Flagged {
    pub value: Var,
    pub empty: bool,
}

/// Mean over `I` of `KL(softmax(f_i) ‖ softmax(f_IG,i))` along the feature
/// axis. The guide side is a constant.
pub fn ig_distill(tape: &mut Tape, aux: Var, guidance: &GuidanceTargets) -> Result<Flagged> {
    let d = tape.value(aux).cols();
    check_guidance(guidance, tape.value(aux).rows(), d)?;
    if guidance.in_image.is_empty() {
        return Ok(Flagged {
            value: constant_zero(tape),
            empty: true,
        });
    }
    let m = guidance.in_image.len();
    let rows = tape.gather_rows(aux, guidance.in_image.clone())?;
    let s = kl_rows_sum(tape, rows, guidance.features.clone())?;
    Ok(Flagged {
        value: tape.scale(s, 1.0 / m as f64),
        empty: false,
    })
}

fn normalized_rows(a: &Array) -> Array {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        r.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// One-way supervised contrastive loss from out-of-image points toward
/// in-image guide features:
///
/// `Σ_c Σ_{o∈O^(c)} −ln( (1/|O^(c)|) Σ_{i∈I^(c)} e^{s_oi} / Σ_{i'∈I} e^{s_oi'} )`
///
/// with `s_oi = f̂_o · ĝ_i / τ` on ℓ2-normalised rows. Classes come from the
/// teacher. Only `f_o` carries gradient. Out-points whose class has no
/// in-image member are skipped; `empty` is set when every point is.
pub fn one_way_contrastive(
    tape: &mut Tape,
    aux: Var,
    guidance: &GuidanceTargets,
    out_of_image: &[usize],
    tau: f64,
) -> Result<Flagged> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let (n, d) = (tape.value(aux).rows(), tape.value(aux).cols());
    check_guidance(guidance, n, d)?;
    if let Some(&bad) = out_of_image.iter().find(|&&o| o >= n) {
        return Err(Error::InvalidInput(format!("out-of-image index {bad} >= {n}")));
    }
    let cls = &guidance.teacher_classes;
    let num_classes = cls.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut in_count = vec![0usize; num_classes];
    for &i in &guidance.in_image {
        in_count[cls[i] as usize] += 1;
    }
    let kept: Vec<usize> = out_of_image
        .iter()
        .copied()
        .filter(|&o| in_count[cls[o] as usize] > 0)
        .collect();
    if kept.is_empty() {
        return Ok(Flagged {
            value: constant_zero(tape),
            empty: true,
        });
    }
    let mut out_count = vec![0usize; num_classes];
    for &o in &kept {
        out_count[cls[o] as usize] += 1;
    }
    let log_norm: f64 = kept.iter().map(|&o| (out_count[cls[o] as usize] as f64).ln()).sum();

    let m = guidance.in_image.len();
    let mut same = Vec::with_capacity(kept.len() * m);
    for &o in &kept {
        same.extend(guidance.in_image.iter().map(|&i| cls[i] == cls[o]));
    }
    let g = tape.constant(normalized_rows(&guidance.features));
    let fo = tape.gather_rows(aux, kept)?;
    let fo = tape.l2_normalize_rows(fo);
    let sim = tape.matmul_t(fo, g)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let lse_all = tape.logsumexp_masked(sim, vec![true; same.len()])?;
    let lse_same = tape.logsumexp_masked(sim, same)?;
    let per_point = tape.sub(lse_all, lse_same)?;
    let s = tape.sum(per_point);
    let offset = tape.constant(Array::scalar(log_norm));
    Ok(Flagged {
        value: tape.add(s, offset)?,
        empty: false,
    })
}

/// Terms of the 3D objective; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub supervised: Var,
    pub consistency: Option<Var>,
    pub image_guidance: Option<Var>,
    pub contrastive: Option<Var>,
}

/// Scalar values of each term of one evaluated objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub supervised: f64,
    pub consistency: f64,
    pub image_guidance: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// `H + consistency + L_IG + λ·L_CL`; fails naming the first non-finite term.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, lambda: f64) -> Result<(Var, LossBundle)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("contrastive weight {lambda} must be >= 0")));
    }
    let mut bundle = LossBundle::default();
    let named: [(&'static str, Option<Var>, &mut f64); 4] = [
        ("supervised", Some(terms.supervised), &mut bundle.supervised),
        ("consistency", terms.consistency, &mut bundle.consistency),
        ("image_guidance", terms.image_guidance, &mut bundle.image_guidance),
        ("contrastive", terms.contrastive, &mut bundle.contrastive),
    ];
    for (term, v, slot) in named {
        if let Some(v) = v {
            let value = tape.value(v).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { term, value });
            }
            *slot = value;
        }
    }
    let mut total = terms.supervised;
    for v in [terms.consistency, terms.image_guidance].into_iter().flatten() {
        total = tape.add(total, v)?;
    }
    if let Some(cl) = terms.contrastive {
        let scaled = tape.scale(cl, lambda);
        total = tape.add(total, scaled)?;
    }
    bundle.total = tape.value(total).item();
    Ok((total, bundle))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidInput(format!(
            "{what} has {got} entries for {want} points"
        )));
    }
    Ok(())
}

fn check_guidance(g: &GuidanceTargets, n: usize, d: usize) -> Result<()> {
    check_len("teacher classes", g.teacher_classes.len(), n)?;
    if g.features.shape() != [g.in_image.len(), d] && !(g.in_image.is_empty() && g.features.is_empty()) {
        return Err(Error::InvalidInput(format!(
            "guide features {:?} for {} in-image points of width {d}",
            g.features.shape(),
            g.in_image.len()
        )));
    }
    if let Some(&bad) = g.in_image.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidInput(format!("in-image index {bad} >= {n}")));
    }
    Ok(())
}
