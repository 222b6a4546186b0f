//! Random instances and independent reference implementations shared by
//! the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fovguide::ig2d::{da_loss, GuideModel, PseudoLabelMap, SourceBatch, TargetBatch, PATCH_INPUT};
use fovguide::losses3d::{
    ig_distill, mt_consistency, one_way_contrastive, supervised_ce, total_loss, GuidanceTargets, LossTerms, Prediction,
};
use fovguide::numerics::{finite_difference, max_relative_error, mlp_forward, Array, MlpSpec, ParamVector, Tape, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Entries smaller than this use an absolute instead of relative error.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// A small network with `C` logits and `d` auxiliary outputs plus a batch
/// exercising every 3D term.
pub struct LossInstance {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub classes: usize,
    pub x: Array,
    pub labels: Vec<u16>,
    pub weak: Vec<bool>,
    pub teacher: Array,
    pub guidance: GuidanceTargets,
    pub out_of_image: Vec<usize>,
    pub tau: f64,
    pub lambda: f64,
}

impl LossInstance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let n = r.random_range(6..20);
        let c = r.random_range(2..5);
        let d = r.random_range(2..6);
        let f = r.random_range(2..6);
        let h = r.random_range(3..9);
        let spec = MlpSpec::new("t.", vec![f, h, c + d]);
        let params = spec.init(&mut r);
        assert!(params.num_scalars() <= 1000);
        let mut weak: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        weak[0] = true;
        weak[n - 1] = false;
        let mut in_image: Vec<usize> = (0..n).filter(|_| r.random_bool(0.5)).collect();
        if in_image.is_empty() {
            in_image.push(0);
        }
        let out_of_image: Vec<usize> = (0..n).filter(|i| !in_image.contains(i)).collect();
        let features = Array::matrix(in_image.len(), d, uniform(&mut r, in_image.len() * d, -2.0, 2.0)).unwrap();
        Self {
            x: Array::matrix(n, f, uniform(&mut r, n * f, -1.5, 1.5)).unwrap(),
            labels: (0..n).map(|_| r.random_range(0..c) as u16).collect(),
            weak,
            teacher: Array::matrix(n, c, uniform(&mut r, n * c, -3.0, 3.0)).unwrap(),
            guidance: GuidanceTargets {
                features,
                in_image,
                teacher_classes: (0..n).map(|_| r.random_range(0..c) as u16).collect(),
            },
            out_of_image,
            tau: r.random_range(0.1..1.0),
            lambda: r.random_range(0.0..0.5),
            spec,
            params,
            classes: c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Supervised,
    Consistency,
    ImageGuidance,
    Contrastive,
    Total,
}

pub const TERMS: [Term; 5] = [
    Term::Supervised,
    Term::Consistency,
    Term::ImageGuidance,
    Term::Contrastive,
    Term::Total,
];

pub fn build_term(
    tape: &mut Tape,
    params: &ParamVector,
    inst: &LossInstance,
    term: Term,
) -> (Var, fovguide::numerics::ParamVars) {
    let vars = tape.watch(params);
    let x = tape.constant(inst.x.clone());
    let out = mlp_forward(tape, &vars, x, &inst.spec).unwrap();
    let pred = Prediction::split(tape, out, inst.classes).unwrap();
    let root = match term {
        Term::Supervised => supervised_ce(tape, pred.logits, &inst.labels, &inst.weak).unwrap(),
        Term::Consistency => mt_consistency(tape, pred.logits, &inst.teacher, &inst.weak).unwrap(),
        Term::ImageGuidance => ig_distill(tape, pred.aux, &inst.guidance).unwrap().value,
        Term::Contrastive => {
            one_way_contrastive(tape, pred.aux, &inst.guidance, &inst.out_of_image, inst.tau)
                .unwrap()
                .value
        }
        Term::Total => {
            let terms = LossTerms {
                supervised: supervised_ce(tape, pred.logits, &inst.labels, &inst.weak).unwrap(),
                consistency: Some(mt_consistency(tape, pred.logits, &inst.teacher, &inst.weak).unwrap()),
                image_guidance: Some(ig_distill(tape, pred.aux, &inst.guidance).unwrap().value),
                contrastive: Some(
                    one_way_contrastive(tape, pred.aux, &inst.guidance, &inst.out_of_image, inst.tau)
                        .unwrap()
                        .value,
                ),
            };
            total_loss(tape, &terms, inst.lambda).unwrap().0
        }
    };
    (root, vars)
}

/// Worst relative error between the tape gradient and central differences.
pub fn term_gradient_error(inst: &LossInstance, term: Term) -> f64 {
    let mut tape = Tape::new();
    let (root, vars) = build_term(&mut tape, &inst.params, inst, term);
    let analytic = tape.grad(root, &vars).unwrap();
    let numeric = finite_difference(&inst.params, FD_STEP, |p| {
        let mut t = Tape::new();
        let (r, _) = build_term(&mut t, p, inst, term);
        t.value(r).item()
    });
    max_relative_error(&analytic, &numeric, GRAD_FLOOR)
}

/// A tiny guide with a few source and target patches.
pub struct GuideInstance {
    pub model: GuideModel,
    pub src_patches: Vec<Array>,
    pub src_classes: Vec<Vec<u16>>,
    pub tgt_patches: Vec<Array>,
    pub pseudo: Vec<PseudoLabelMap>,
    pub lambda_p: f64,
}

impl GuideInstance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let c = r.random_range(2..4);
        let model = GuideModel::new(r.random_range(2..5), r.random_range(3..7), c, &mut r);
        assert!(model.params.num_scalars() <= 1000);
        let patches = |r: &mut ChaCha8Rng, n: usize| {
            Array::matrix(n, PATCH_INPUT, uniform(r, n * PATCH_INPUT, -1.0, 1.0)).unwrap()
        };
        let src_patches: Vec<Array> = (0..2).map(|_| patches(&mut r, 6)).collect();
        let tgt_patches: Vec<Array> = (0..2).map(|_| patches(&mut r, 6)).collect();
        let src_classes = (0..2)
            .map(|_| (0..6).map(|_| r.random_range(0..c) as u16).collect())
            .collect();
        let pseudo = (0..2)
            .map(|_| PseudoLabelMap {
                width: 3,
                height: 2,
                classes: (0..6).map(|_| r.random_range(0..c) as u16).collect(),
                valid: (0..6).map(|_| r.random_bool(0.8)).collect(),
                projected: (0..6).map(|_| r.random_bool(0.3)).collect(),
            })
            .collect();
        Self {
            model,
            src_patches,
            src_classes,
            tgt_patches,
            pseudo,
            lambda_p: r.random_range(1.0..12.0),
        }
    }

    pub fn loss(&self, tape: &mut Tape, params: &ParamVector) -> (Var, fovguide::numerics::ParamVars) {
        let model = self.model.with_params(params.clone()).unwrap();
        let vars = tape.watch(params);
        let src: Vec<SourceBatch> = self
            .src_patches
            .iter()
            .zip(&self.src_classes)
            .map(|(p, c)| SourceBatch { patches: p, classes: c })
            .collect();
        let tgt: Vec<TargetBatch> = self
            .tgt_patches
            .iter()
            .zip(&self.pseudo)
            .map(|(p, m)| TargetBatch { patches: p, pseudo: m })
            .collect();
        (
            da_loss(tape, &model, &vars, &src, &tgt, self.lambda_p, None).unwrap(),
            vars,
        )
    }

    pub fn gradient_error(&self) -> f64 {
        let mut tape = Tape::new();
        let (root, vars) = self.loss(&mut tape, &self.model.params);
        let analytic = tape.grad(root, &vars).unwrap();
        let numeric = finite_difference(&self.model.params, FD_STEP, |p| {
            let mut t = Tape::new();
            let (r, _) = self.loss(&mut t, p);
            t.value(r).item()
        });
        max_relative_error(&analytic, &numeric, GRAD_FLOOR)
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// The contrastive objective evaluated literally: for every class, every
/// out-point of that class, a plain sum over same-class in-points divided
/// by a plain sum over all in-points.
pub fn contrastive_brute_force(
    out_feats: &[Vec<f64>],
    out_classes: &[u16],
    in_feats: &[Vec<f64>],
    in_classes: &[u16],
    tau: f64,
) -> f64 {
    let max_c = out_classes.iter().chain(in_classes).copied().max().unwrap_or(0);
    let mut loss = 0.0;
    for c in 0..=max_c {
        let o_c: Vec<usize> = (0..out_feats.len()).filter(|&o| out_classes[o] == c).collect();
        let i_c: Vec<usize> = (0..in_feats.len()).filter(|&i| in_classes[i] == c).collect();
        if o_c.is_empty() || i_c.is_empty() {
            continue;
        }
        for &o in &o_c {
            let fo = unit(&out_feats[o]);
            let sim = |i: usize| {
                let fi = unit(&in_feats[i]);
                (fo.iter().zip(&fi).map(|(a, b)| a * b).sum::<f64>() / tau).exp()
            };
            let denom: f64 = (0..in_feats.len()).map(sim).sum();
            let mut inner = 0.0;
            for &i in &i_c {
                inner += sim(i) / denom;
            }
            loss += -(inner / o_c.len() as f64).ln();
        }
    }
    loss
}
