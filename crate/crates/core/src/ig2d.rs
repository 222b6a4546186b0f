//! The 2D guide: a per-pixel patch MLP with a linear classifier, trained by
//! source supervision plus EMA-teacher pseudo-labels on the target domain
//! that are anchored by projected scribbles.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{Frame, Image};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraModel};
use crate::numerics::{
    mlp_eval, mlp_forward, read_named_arrays, write_named_arrays, Array, MlpSpec, NamedArrays, ParamVars, ParamVector,
    Tape, Var,
};
use crate::teacher::{assign_classes, TeacherState};

/// Side of the square pixel neighbourhood fed to the featurizer.
pub const PATCH: usize = 3;
/// Input width of the featurizer: 3×3 pixels × 3 channels.
pub const PATCH_INPUT: usize = PATCH * PATCH * 3;

/// Featurizer `patch → ℝ^d` followed by a linear classifier `ℝ^d → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideModel {
    pub params: ParamVector,
    pub featurizer: MlpSpec,
    pub classifier: MlpSpec,
}

impl GuideModel {
    pub fn new(feature_dim: usize, hidden: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let featurizer = MlpSpec::new("guide.f.", vec![PATCH_INPUT, hidden, feature_dim]);
        let classifier = MlpSpec::new("guide.c.", vec![feature_dim, num_classes]);
        let mut params = featurizer.init(rng);
        params.extend(classifier.init(rng));
        Self {
            params,
            featurizer,
            classifier,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.featurizer.output_dim()
    }

    pub fn hidden(&self) -> usize {
        self.featurizer.layers[1]
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Same architecture with different weights.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        self.params.check_compatible(&params)?;
        Ok(Self { params, ..self.clone() })
    }

    /// Features of pre-extracted patches.
    pub fn features(&self, patches: &Array) -> Result<Array> {
        Ok(mlp_eval(&self.params, patches, &self.featurizer)?)
    }

    /// Class logits of pre-extracted patches.
    pub fn logits(&self, patches: &Array) -> Result<Array> {
        let f = self.features(patches)?;
        Ok(mlp_eval(&self.params, &f, &self.classifier)?)
    }

    /// Per-pixel argmax over an image.
    pub fn predict(&self, image: &Image) -> Result<Vec<u16>> {
        Ok(assign_classes(&self.logits(&patch_matrix(image))?))
    }
}

/// `H·W × 27` matrix of 3×3 colour neighbourhoods, row `l·W + k`, with the
/// border replicated outwards. Channels are mapped from `[0, 1]` to `[-1, 1]`.
pub fn patch_matrix(image: &Image) -> Array {
    let (w, h) = (image.width as usize, image.height as usize);
    let mut data = Vec::with_capacity(w * h * PATCH_INPUT);
    let r = PATCH as i64 / 2;
    for row in 0..h as i64 {
        for col in 0..w as i64 {
            for dy in -r..=r {
                for dx in -r..=r {
                    let y = (row + dy).clamp(0, h as i64 - 1) as usize;
                    let x = (col + dx).clamp(0, w as i64 - 1) as usize;
                    data.extend(image.pixel(x, y).iter().map(|v| 2.0 * v - 1.0));
                }
            }
        }
    }
    Array::matrix(w * h, PATCH_INPUT, data).expect("patch matrix shape")
}

/// Per-pixel guide features (`H·W × d`, row `l·W + k`), taken before the
/// classifier.
pub fn guide_features(model: &GuideModel, image: &Image, cam: &CameraModel) -> Result<Array> {
    if image.width != cam.width() || image.height != cam.height() {
        return Err(Error::InvalidInput(format!(
            "image is {}×{} but the camera expects {}×{}",
            image.width,
            image.height,
            cam.width(),
            cam.height()
        )));
    }
    model.features(&patch_matrix(image))
}

/// Target-image labels for the adaptation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<u16>,
    /// Pixels that take part in the loss.
    pub valid: Vec<bool>,
    /// Pixels overwritten by a projected scribble label.
    pub projected: Vec<bool>,
}

impl PseudoLabelMap {
    pub fn num_projected(&self) -> usize {
        self.projected.iter().filter(|&&p| p).count()
    }
}

/// Writes projected weak labels into `map`; where several points hit the
/// same pixel the nearest one wins.
fn overwrite_with_scribbles(map: &mut PseudoLabelMap, frame: &Frame) {
    let corr = project(&frame.cloud, &frame.cam);
    let mut depth = vec![f64::INFINITY; map.classes.len()];
    for (i, m) in corr.matches.iter().enumerate() {
        if !frame.weak_mask[i] {
            continue;
        }
        if let Some(px) = m.pixel_index(map.width) {
            if m.depth < depth[px] {
                depth[px] = m.depth;
                map.classes[px] = frame.labels[i];
                map.projected[px] = true;
                map.valid[px] = true;
            }
        }
    }
}

/// Teacher argmax everywhere, then `P(m(x)) ← y` for every weak-labeled
/// point with a valid pixel.
pub fn make_pseudo_labels(teacher: &GuideModel, frame: &Frame) -> Result<PseudoLabelMap> {
    let classes = teacher.predict(&frame.image)?;
    let n = classes.len();
    let mut map = PseudoLabelMap {
        width: frame.image.width,
        height: frame.image.height,
        classes,
        valid: vec![true; n],
        projected: vec![false; n],
    };
    overwrite_with_scribbles(&mut map, frame);
    Ok(map)
}

/// Only the projected scribbles, with no teacher labels.
pub fn scribble_labels(frame: &Frame) -> PseudoLabelMap {
    let n = frame.image.num_pixels();
    let mut map = PseudoLabelMap {
        width: frame.image.width,
        height: frame.image.height,
        classes: vec![0; n],
        valid: vec![false; n],
        projected: vec![false; n],
    };
    overwrite_with_scribbles(&mut map, frame);
    map
}

/// Dense supervision rows: patches and their classes.
#[derive(Clone, Copy, Debug)]
pub struct SourceBatch<'a> {
    pub patches: &'a Array,
    pub classes: &'a [u16],
}

/// Target rows with their pseudo-labels.
#[derive(Clone, Copy, Debug)]
pub struct TargetBatch<'a> {
    pub patches: &'a Array,
    pub pseudo: &'a PseudoLabelMap,
}

fn stack(parts: &[&Array], rows: &[Vec<usize>]) -> Array {
    let c = parts.first().map_or(PATCH_INPUT, |p| p.cols());
    let mut data = Vec::new();
    let mut n = 0;
    for (p, idx) in parts.iter().zip(rows) {
        for &i in idx {
            data.extend_from_slice(p.row(i));
        }
        n += idx.len();
    }
    Array::matrix(n, c, data).expect("stacked rows")
}

fn classifier_log_probs(tape: &mut Tape, model: &GuideModel, vars: &ParamVars, x: Array) -> Result<Var> {
    let x = tape.constant(x);
    let f = mlp_forward(tape, vars, x, &model.featurizer)?;
    let z = mlp_forward(tape, vars, f, &model.classifier)?;
    Ok(tape.log_softmax(z))
}

/// `L_S + L_DA`.
///
/// `L_S` is the mean cross-entropy over all source rows. `L_DA` sums the
/// cross-entropy of valid target pixels, weighted `λ_p` at projected pixels
/// and 1 elsewhere, and divides by the number of target pixels considered
/// (invalid pixels contribute zero).
/// `rows` optionally restricts each batch to a subset of its pixels
/// (sources first, then targets).
pub fn da_loss(
    tape: &mut Tape,
    model: &GuideModel,
    vars: &ParamVars,
    source: &[SourceBatch],
    target: &[TargetBatch],
    lambda_p: f64,
    rows: Option<&[Vec<usize>]>,
) -> Result<Var> {
    if !(lambda_p >= 1.0) {
        return Err(Error::Config(format!("projected-label weight {lambda_p} must be >= 1")));
    }
    let all_rows: Vec<Vec<usize>> = match rows {
        Some(r) => {
            if r.len() != source.len() + target.len() {
                return Err(Error::InvalidInput("row subsets do not match the batches".into()));
            }
            r.to_vec()
        }
        None => source
            .iter()
            .map(|s| (0..s.patches.rows()).collect())
            .chain(target.iter().map(|t| (0..t.patches.rows()).collect()))
            .collect(),
    };
    let (src_rows, tgt_rows) = all_rows.split_at(source.len());
    for s in source {
        if s.classes.len() != s.patches.rows() {
            return Err(Error::InvalidInput("source class map does not match its image".into()));
        }
    }
    for t in target {
        if t.pseudo.classes.len() != t.patches.rows() {
            return Err(Error::InvalidInput("pseudo-label map does not match its image".into()));
        }
    }

    let mut total = tape.constant(Array::scalar(0.0));
    let n_src: usize = src_rows.iter().map(Vec::len).sum();
    if n_src > 0 {
        let x = stack(&source.iter().map(|s| s.patches).collect::<Vec<_>>(), src_rows);
        let labels: Vec<usize> = source
            .iter()
            .zip(src_rows)
            .flat_map(|(s, idx)| idx.iter().map(move |&i| s.classes[i] as usize))
            .collect();
        let lp = classifier_log_probs(tape, model, vars, x)?;
        let picked = tape.pick_cols(lp, labels)?;
        let s = tape.sum(picked);
        let ls = tape.scale(s, -1.0 / n_src as f64);
        total = tape.add(total, ls)?;
    }

    let tgt_valid: Vec<Vec<usize>> = target
        .iter()
        .zip(tgt_rows)
        .map(|(t, idx)| idx.iter().copied().filter(|&i| t.pseudo.valid[i]).collect())
        .collect();
    let n_tgt: usize = tgt_valid.iter().map(Vec::len).sum();
    let n_rows: usize = tgt_rows.iter().map(Vec::len).sum();
    if n_tgt > 0 {
        let x = stack(&target.iter().map(|t| t.patches).collect::<Vec<_>>(), &tgt_valid);
        let mut labels = Vec::with_capacity(n_tgt);
        let mut weights = Vec::with_capacity(n_tgt);
        for (t, idx) in target.iter().zip(&tgt_valid) {
            for &i in idx {
                labels.push(t.pseudo.classes[i] as usize);
                let w = if t.pseudo.projected[i] { lambda_p } else { 1.0 };
                weights.push(-w / n_rows as f64);
            }
        }
        let lp = classifier_log_probs(tape, model, vars, x)?;
        let picked = tape.pick_cols(lp, labels)?;
        let lda = tape.weighted_sum(picked, weights)?;
        total = tape.add(total, lda)?;
    }
    Ok(total)
}

/// Whether the guide sees the target domain during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuideMode {
    SourceOnly,
    /// Source supervision plus teacher pseudo-labels anchored by projected
    /// scribbles on the target.
    Adapt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuideConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub lambda_p: f64,
    /// Images per domain per step.
    pub batch: usize,
    /// Pseudo-labels are recomputed from the teacher every this many steps.
    pub refresh_every: usize,
    /// Before this step the target loss uses projected scribbles only.
    pub warmup: usize,
    /// Random pixels drawn per image and step; 0 uses every pixel.
    pub pixels_per_image: usize,
    pub mode: GuideMode,
}

impl Default for GuideConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_dim: 16,
            hidden: 32,
            steps: 3000,
            learning_rate: 0.3,
            alpha: 0.99,
            lambda_p: 10.0,
            batch: 2,
            refresh_every: 50,
            warmup: 100,
            pixels_per_image: 256,
            mode: GuideMode::Adapt,
        }
    }
}

impl GuideConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.batch == 0 || self.refresh_every == 0 {
            return Err(Error::Config(
                "guide sizes, batch and refresh interval must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.alpha) || !(self.lambda_p >= 1.0) {
            return Err(Error::Config(
                "guide needs lr > 0, alpha in [0, 1] and lambda_p >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of [`train_guide`]: the frozen student and its loss history.
#[derive(Clone, Debug)]
pub struct TrainedGuide {
    pub model: GuideModel,
    pub losses: Vec<f64>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Mean-teacher training of the guide. Source frames supply dense class
/// maps; target frames only their weak point labels.
pub fn train_guide(source: &[Frame], target: &[Frame], num_classes: usize, cfg: &GuideConfig) -> Result<TrainedGuide> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidInput("guide training needs source frames".into()));
    }
    let adapt = cfg.mode == GuideMode::Adapt && !target.is_empty();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = GuideModel::new(cfg.feature_dim, cfg.hidden, num_classes, &mut init_rng);
    let mut teacher = TeacherState::new(&model.params, cfg.alpha)?;

    let src_patches: Vec<Array> = source.iter().map(|f| patch_matrix(&f.image)).collect();
    let tgt_patches: Vec<Array> = if adapt {
        target.iter().map(|f| patch_matrix(&f.image)).collect()
    } else {
        Vec::new()
    };
    let scribbles: Vec<PseudoLabelMap> = if adapt {
        target.iter().map(scribble_labels).collect()
    } else {
        Vec::new()
    };
    let mut pseudo = scribbles.clone();

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if adapt && step >= cfg.warmup && (step - cfg.warmup).is_multiple_of(cfg.refresh_every) {
            let t = model.with_params(teacher.shadow.clone())?;
            pseudo = target
                .iter()
                .map(|f| make_pseudo_labels(&t, f))
                .collect::<Result<_>>()?;
        }
        let mut rng = step_rng(cfg.seed, step);
        let src_idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..source.len())).collect();
        let tgt_idx: Vec<usize> = if adapt {
            (0..cfg.batch).map(|_| rng.random_range(0..target.len())).collect()
        } else {
            Vec::new()
        };
        let mut rows = Vec::new();
        for &i in &src_idx {
            rows.push(pick_pixels(&mut rng, src_patches[i].rows(), cfg.pixels_per_image));
        }
        for &i in &tgt_idx {
            rows.push(pick_pixels(&mut rng, tgt_patches[i].rows(), cfg.pixels_per_image));
        }
        let src: Vec<SourceBatch> = src_idx
            .iter()
            .map(|&i| SourceBatch {
                patches: &src_patches[i],
                classes: &source[i].image.classes,
            })
            .collect();
        let tgt: Vec<TargetBatch> = tgt_idx
            .iter()
            .map(|&i| TargetBatch {
                patches: &tgt_patches[i],
                pseudo: &pseudo[i],
            })
            .collect();

        let mut tape = Tape::new();
        let vars = tape.watch(&model.params);
        let loss = da_loss(&mut tape, &model, &vars, &src, &tgt, cfg.lambda_p, Some(&rows))?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("guide loss {value}"),
            });
        }
        let grads = tape.grad(loss, &vars)?;
        model.params.axpy(-cfg.learning_rate, &grads)?;
        teacher.ema_update(&model.params)?;
        losses.push(value);
    }
    Ok(TrainedGuide { model, losses })
}

fn pick_pixels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k == 0 || k >= n {
        return (0..n).collect();
    }
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Fraction of pixels whose argmax matches the dense class map.
pub fn pixel_accuracy(model: &GuideModel, frames: &[Frame]) -> Result<f64> {
    let (mut ok, mut total) = (0usize, 0usize);
    for f in frames {
        let pred = model.predict(&f.image)?;
        ok += pred.iter().zip(&f.image.classes).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    Ok(if total == 0 { 0.0 } else { ok as f64 / total as f64 })
}

/// Packs the guide into a named-array container.
pub fn guide_to_container(model: &GuideModel) -> NamedArrays {
    let meta = BTreeMap::from([
        ("kind".to_string(), "guide".to_string()),
        ("feature_dim".to_string(), model.feature_dim().to_string()),
        ("hidden".to_string(), model.hidden().to_string()),
        ("classes".to_string(), model.num_classes().to_string()),
    ]);
    NamedArrays {
        meta,
        arrays: model.params.clone(),
    }
}

pub fn guide_from_container(c: &NamedArrays) -> Result<GuideModel> {
    if c.meta.get("kind").map(String::as_str) != Some("guide") {
        return Err(Error::format("guide checkpoint", "not a guide container"));
    }
    let field = |k: &str| -> Result<usize> {
        c.meta
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("guide checkpoint", format!("missing or bad `{k}`")))
    };
    let skeleton = GuideModel::new(
        field("feature_dim")?,
        field("hidden")?,
        field("classes")?,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    skeleton.with_params(c.arrays.clone())
}

pub fn save_guide(path: impl AsRef<Path>, model: &GuideModel) -> Result<()> {
    write_named_arrays(BufWriter::new(File::create(path)?), &guide_to_container(model))
}

pub fn load_guide(path: impl AsRef<Path>) -> Result<GuideModel> {
    guide_from_container(&read_named_arrays(BufReader::new(File::open(path)?))?)
}
