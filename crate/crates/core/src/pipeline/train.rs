//! Stage-2 training of the per-point student, checkpoints and evaluation.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datagen::Frame;
use crate::error::{Error, Result};
use crate::fovmix::fovmix_batch;
use crate::geometry::{partition, project};
use crate::ig2d::{guide_features, guide_to_container, GuideModel};
use crate::losses3d::{
    ig_distill, mt_consistency, one_way_contrastive, supervised_ce, total_loss, GuidanceTargets, LossBundle, LossTerms,
    Prediction,
};
use crate::metrics::{border_split, EvalReport, Evaluator};
use crate::numerics::{
    mlp_eval, mlp_forward, read_named_arrays, write_named_arrays, Array, MlpSpec, NamedArrays, ParamVars, ParamVector,
    Tape, Var,
};
use crate::teacher::{assign_classes, split_output, TeacherPrediction, TeacherState};

use super::config::{RunConfig, Supervision};
use super::data::Dataset;
use super::features::{point_features, POINT_FEATURES};

/// Per-point tanh MLP whose output row holds `C` class logits followed by
/// `d` auxiliary features.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentNet {
    pub spec: MlpSpec,
    pub num_classes: usize,
}

impl StudentNet {
    pub fn new(cfg: &RunConfig, num_classes: usize) -> Self {
        Self {
            spec: MlpSpec::new(
                "student.",
                vec![POINT_FEATURES, cfg.hidden, cfg.hidden, num_classes + cfg.feature_dim],
            ),
            num_classes,
        }
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamVector {
        self.spec.init(rng)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Prediction> {
        let out = mlp_forward(tape, vars, x, &self.spec)?;
        Prediction::split(tape, out, self.num_classes)
    }

    pub fn eval(&self, params: &ParamVector, x: &Array) -> Result<TeacherPrediction> {
        split_output(&mlp_eval(params, x, &self.spec)?, self.num_classes)
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub num_classes: usize,
    pub student: ParamVector,
    pub teacher: TeacherState,
    /// Optimiser steps taken so far.
    pub step: usize,
    /// Loss terms of every step taken.
    pub history: Vec<LossBundle>,
    /// Fingerprint of the guide used, if any.
    pub guide: Option<String>,
}

impl Checkpoint {
    /// Untrained student and its teacher copy.
    pub fn init(cfg: &RunConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student = StudentNet::new(cfg, num_classes).init(&mut rng);
        let teacher = TeacherState::new(&student, cfg.alpha)?;
        Ok(Self {
            config: cfg.clone(),
            num_classes,
            student,
            teacher,
            step: 0,
            history: Vec::new(),
            guide: None,
        })
    }

    pub fn net(&self) -> StudentNet {
        StudentNet::new(&self.config, self.num_classes)
    }

    /// Class predictions for one cloud, from the EMA weights when the
    /// configuration asks for it.
    pub fn predict(&self, cloud: &crate::geometry::PointCloud) -> Result<Vec<u16>> {
        let weights = if self.config.eval_ema {
            &self.teacher.shadow
        } else {
            &self.student
        };
        let out = self.net().eval(weights, &point_features(cloud))?;
        Ok(assign_classes(&out.logits))
    }

    pub fn to_container(&self) -> NamedArrays {
        let mut meta: BTreeMap<String, String> = self
            .config
            .to_map()
            .into_iter()
            .map(|(k, v)| (format!("config.{k}"), v))
            .collect();
        meta.insert("kind".into(), "student".into());
        meta.insert("classes".into(), self.num_classes.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("teacher_step".into(), self.teacher.step.to_string());
        if let Some(g) = &self.guide {
            meta.insert("guide".into(), g.clone());
        }
        let mut arrays = ParamVector::new();
        for (k, v) in self.student.iter() {
            arrays.insert(format!("student/{k}"), v.clone());
        }
        for (k, v) in self.teacher.shadow.iter() {
            arrays.insert(format!("teacher/{k}"), v.clone());
        }
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|b| [b.supervised, b.consistency, b.image_guidance, b.contrastive, b.total])
            .collect();
        arrays.insert(
            "history",
            Array::new(vec![self.history.len(), 5], hist).expect("history shape"),
        );
        NamedArrays { meta, arrays }
    }

    pub fn from_container(c: &NamedArrays) -> Result<Self> {
        let bad = |d: String| Error::format("student checkpoint", d);
        if c.meta.get("kind").map(String::as_str) != Some("student") {
            return Err(bad("not a student container".into()));
        }
        let num = |k: &str| -> Result<u64> {
            c.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("missing or bad `{k}`")))
        };
        let cfg_map: BTreeMap<String, String> = c
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let config = RunConfig::from_map(&cfg_map)?;
        let num_classes = num("classes")? as usize;
        let mut student = ParamVector::new();
        let mut shadow = ParamVector::new();
        let mut history = Vec::new();
        for (k, v) in c.arrays.iter() {
            if let Some(name) = k.strip_prefix("student/") {
                student.insert(name, v.clone());
            } else if let Some(name) = k.strip_prefix("teacher/") {
                shadow.insert(name, v.clone());
            } else if k == "history" {
                if v.shape().len() != 2 || v.cols() != 5 {
                    return Err(bad(format!("history has shape {:?}", v.shape())));
                }
                history = (0..v.rows())
                    .map(|i| {
                        let r = v.row(i);
                        LossBundle {
                            supervised: r[0],
                            consistency: r[1],
                            image_guidance: r[2],
                            contrastive: r[3],
                            total: r[4],
                        }
                    })
                    .collect();
            } else {
                return Err(bad(format!("unexpected entry `{k}`")));
            }
        }
        let reference = StudentNet::new(&config, num_classes).init(&mut ChaCha8Rng::seed_from_u64(0));
        reference.check_compatible(&student)?;
        reference.check_compatible(&shadow)?;
        Ok(Self {
            teacher: TeacherState {
                shadow,
                alpha: config.alpha,
                step: num("teacher_step")?,
            },
            config,
            num_classes,
            student,
            step: num("step")? as usize,
            history,
            guide: c.meta.get("guide").cloned(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_named_arrays(BufWriter::new(File::create(path)?), &self.to_container())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&read_named_arrays(BufReader::new(File::open(path)?))?)
    }
}

/// 64-bit FNV-1a over the guide's serialised form.
pub fn guide_fingerprint(guide: &GuideModel) -> String {
    let mut bytes = Vec::new();
    write_named_arrays(&mut bytes, &guide_to_container(guide)).expect("in-memory write");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Per-frame quantities that do not change during training.
struct FrameCache {
    features: Array,
    in_image: Vec<usize>,
    pixels: Vec<usize>,
    guide: Option<Array>,
}

fn in_image_pixels(frame: &Frame) -> (Vec<usize>, Vec<usize>) {
    let corr = project(&frame.cloud, &frame.cam);
    let (inside, _) = partition(&corr);
    let px = inside
        .iter()
        .map(|&i| corr.matches[i].pixel_index(frame.image.width).expect("valid match"))
        .collect();
    (inside, px)
}

/// One step's stacked inputs.
struct StepBatch {
    features: Array,
    labels: Vec<u16>,
    weak_mask: Vec<bool>,
    in_image: Vec<usize>,
    guide_rows: Vec<f64>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000_0000_0000);
    rng.set_stream(step as u64 + 1);
    rng
}

fn choose_frames(rng: &mut ChaCha8Rng, train: &[Frame], labeled: &[usize], cfg: &RunConfig) -> Vec<usize> {
    let semi = matches!(cfg.supervision, Supervision::Semi(_));
    (0..cfg.batch)
        .map(|slot| {
            if semi && slot == 0 && !labeled.is_empty() {
                labeled[rng.random_range(0..labeled.len())]
            } else {
                rng.random_range(0..train.len())
            }
        })
        .collect()
}

/// One frame of a step: the frame, its features, in-image indices, their
/// pixels and the cache entry whose guide grid applies.
type BatchPart<'a> = (Cow<'a, Frame>, Cow<'a, Array>, Vec<usize>, Vec<usize>, Option<usize>);

fn build_batch(
    rng: &mut ChaCha8Rng,
    cfg: &RunConfig,
    train: &[Frame],
    cache: &[FrameCache],
    picks: &[usize],
) -> Result<StepBatch> {
    let d = cfg.feature_dim;
    let mut parts: Vec<BatchPart> = Vec::new();
    if cfg.toggles.fovmix {
        let frames: Vec<Frame> = picks.iter().map(|&i| train[i].clone()).collect();
        let semi = matches!(cfg.supervision, Supervision::Semi(_));
        let mixes = fovmix_batch(&frames, semi, cfg.max_yaw, rng.next_u64())?;
        for m in mixes {
            let f = m.sample.frame;
            let corr = project(&f.cloud, &f.cam);
            let px = m
                .sample
                .in_image
                .iter()
                .map(|&i| {
                    corr.matches[i]
                        .pixel_index(f.image.width)
                        .ok_or_else(|| Error::InvalidInput("kept in-image point lost its pixel".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let feats = point_features(&f.cloud);
            parts.push((
                Cow::Owned(f),
                Cow::Owned(feats),
                m.sample.in_image,
                px,
                Some(picks[m.a]),
            ));
        }
    } else {
        for &i in picks {
            let c = &cache[i];
            parts.push((
                Cow::Borrowed(&train[i]),
                Cow::Borrowed(&c.features),
                c.in_image.clone(),
                c.pixels.clone(),
                Some(i),
            ));
        }
    }
    let total: usize = parts.iter().map(|p| p.0.len()).sum();
    let mut features = Vec::with_capacity(total * POINT_FEATURES);
    let mut labels = Vec::with_capacity(total);
    let mut weak_mask = Vec::with_capacity(total);
    let mut in_image = Vec::new();
    let mut guide_rows = Vec::new();
    let mut offset = 0;
    for (frame, feats, inside, px, image_of) in &parts {
        features.extend_from_slice(feats.data());
        labels.extend_from_slice(&frame.labels);
        weak_mask.extend_from_slice(&frame.weak_mask);
        if let Some(grid) = image_of.and_then(|i| cache[i].guide.as_ref()) {
            for (&i, &p) in inside.iter().zip(px) {
                in_image.push(offset + i);
                guide_rows.extend_from_slice(&grid.row(p)[..d]);
            }
        } else {
            in_image.extend(inside.iter().map(|&i| offset + i));
        }
        offset += frame.len();
    }
    Ok(StepBatch {
        features: Array::matrix(total, POINT_FEATURES, features)?,
        labels,
        weak_mask,
        in_image,
        guide_rows,
    })
}

fn add_noise(x: &Array, std: f64, rng: &mut ChaCha8Rng) -> Array {
    if std <= 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    out
}

/// Prepares the frozen per-frame data of a training split.
fn build_cache(train: &[Frame], guide: Option<&GuideModel>) -> Result<Vec<FrameCache>> {
    train
        .iter()
        .map(|f| {
            let (in_image, pixels) = in_image_pixels(f);
            let guide = guide.map(|g| guide_features(g, &f.image, &f.cam)).transpose()?;
            Ok(FrameCache {
                features: point_features(&f.cloud),
                in_image,
                pixels,
                guide,
            })
        })
        .collect()
}

/// Trains a fresh student for `cfg.steps` steps.
pub fn train_student(cfg: &RunConfig, data: &Dataset, guide: Option<&GuideModel>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::init(cfg, data.num_classes())?;
    continue_training(ckpt, data, guide, cfg.steps)
}

/// Runs steps `ckpt.step..until` with the checkpoint's configuration.
/// Every step draws from its own RNG stream, so resuming from a saved
/// checkpoint reproduces an uninterrupted run exactly.
pub fn continue_training(
    mut ckpt: Checkpoint,
    data: &Dataset,
    guide: Option<&GuideModel>,
    until: usize,
) -> Result<Checkpoint> {
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    let t = cfg.toggles;
    if t.needs_guide() && guide.is_none() {
        return Err(Error::Config(
            "image guidance is enabled but no guide was supplied".into(),
        ));
    }
    let guide = if t.needs_guide() { guide } else { None };
    if let Some(g) = guide {
        if g.feature_dim() != cfg.feature_dim {
            return Err(Error::Config(format!(
                "guide feature dimension {} differs from configured {}",
                g.feature_dim(),
                cfg.feature_dim
            )));
        }
        let fp = guide_fingerprint(g);
        match &ckpt.guide {
            Some(old) if *old != fp => {
                return Err(Error::Config("checkpoint was trained with a different guide".into()));
            }
            _ => ckpt.guide = Some(fp),
        }
    }
    if data.train.is_empty() {
        return Err(Error::InvalidInput("no training frames".into()));
    }
    let net = ckpt.net();
    let cache = build_cache(&data.train, guide)?;
    let labeled: Vec<usize> = (0..data.train.len()).filter(|&i| data.train[i].frame_labeled).collect();
    if matches!(cfg.supervision, Supervision::Semi(_)) && labeled.is_empty() {
        return Err(Error::InvalidInput(
            "semi-supervised training without labeled frames".into(),
        ));
    }

    for step in ckpt.step..until {
        let mut rng = step_rng(cfg.seed, step);
        let picks = choose_frames(&mut rng, &data.train, &labeled, &cfg);
        let batch = build_batch(&mut rng, &cfg, &data.train, &cache, &picks)?;
        let n = batch.labels.len();
        let x_student = add_noise(&batch.features, cfg.input_noise, &mut rng);
        let teacher_out = if t.mt || t.cl {
            let x_teacher = add_noise(&batch.features, cfg.input_noise, &mut rng);
            Some(net.eval(&ckpt.teacher.shadow, &x_teacher)?)
        } else {
            None
        };

        let mut tape = Tape::new();
        let vars = tape.watch(&ckpt.student);
        let x = tape.constant(x_student);
        let pred = net.forward(&mut tape, &vars, x)?;
        let supervised = supervised_ce(&mut tape, pred.logits, &batch.labels, &batch.weak_mask)?;
        let consistency = match (&teacher_out, t.mt) {
            (Some(tp), true) => Some(mt_consistency(&mut tape, pred.logits, &tp.logits, &batch.weak_mask)?),
            _ => None,
        };
        let mut image_guidance = None;
        let mut contrastive = None;
        if t.ig {
            let targets = GuidanceTargets {
                features: Array::matrix(batch.in_image.len(), cfg.feature_dim, batch.guide_rows.clone())?,
                in_image: batch.in_image.clone(),
                teacher_classes: teacher_out
                    .as_ref()
                    .map_or_else(|| vec![0; n], |tp| assign_classes(&tp.logits)),
            };
            image_guidance = Some(ig_distill(&mut tape, pred.aux, &targets)?.value);
            if t.cl {
                let mut out_idx = targets.out_of_image(n);
                if cfg.cl_max_points > 0 && out_idx.len() > cfg.cl_max_points {
                    let mut keep = sample(&mut rng, out_idx.len(), cfg.cl_max_points).into_vec();
                    keep.sort_unstable();
                    out_idx = keep.into_iter().map(|k| out_idx[k]).collect();
                }
                contrastive = Some(one_way_contrastive(&mut tape, pred.aux, &targets, &out_idx, cfg.tau)?.value);
            }
        }
        let terms = LossTerms {
            supervised,
            consistency,
            image_guidance,
            contrastive,
        };
        let (root, bundle) = total_loss(&mut tape, &terms, cfg.lambda).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        let grads = tape.grad(root, &vars)?;
        if !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite gradient; terms {bundle:?}"),
            });
        }
        ckpt.student.axpy(-cfg.learning_rate, &grads)?;
        ckpt.teacher.ema_update(&ckpt.student)?;
        ckpt.history.push(bundle);
        ckpt.step = step + 1;
    }
    Ok(ckpt)
}

/// Precomputed border flags of evaluation frames, reusable across models.
#[derive(Clone, Debug)]
pub struct EvalSet<'a> {
    frames: &'a [Frame],
    border: Vec<Vec<bool>>,
    small_classes: Vec<bool>,
    num_classes: usize,
}

impl<'a> EvalSet<'a> {
    pub fn new(frames: &'a [Frame], num_classes: usize, small_classes: Vec<bool>) -> Result<Self> {
        let border = frames
            .iter()
            .map(|f| border_split(&f.cloud, &f.labels))
            .collect::<Result<_>>()?;
        Ok(Self {
            frames,
            border,
            small_classes,
            num_classes,
        })
    }

    /// Scores `ckpt`'s student on every frame; `reference` fills the
    /// relative column.
    pub fn evaluate(&self, ckpt: &Checkpoint, reference: Option<f64>) -> Result<EvalReport> {
        let mut ev = Evaluator::new(self.num_classes, self.small_classes.clone());
        for (f, b) in self.frames.iter().zip(&self.border) {
            let pred = ckpt.predict(&f.cloud)?;
            ev.add_frame_with_border(&f.cloud, &pred, &f.labels, b)?;
        }
        Ok(ev.finish(reference))
    }
}

/// Convenience wrapper over [`EvalSet`] for a one-off evaluation.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, reference: Option<f64>) -> Result<EvalReport> {
    EvalSet::new(&data.eval, data.num_classes(), data.scene.small_classes())?.evaluate(ckpt, reference)
}

/// Uniform draw used by tests that need a throwaway seed.
pub fn random_seed(rng: &mut impl Rng) -> u64 {
    rng.random()
}
