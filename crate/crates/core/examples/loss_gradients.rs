//! Evaluates every 3D training term on a small random batch and checks the
//! backward pass of their sum against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fovguide::losses3d::{
    ig_distill, mt_consistency, one_way_contrastive, supervised_ce, total_loss, GuidanceTargets, LossTerms, Prediction,
};
use fovguide::numerics::{finite_difference, max_relative_error, mlp_forward, Array, MlpSpec, ParamVector, Tape};

const N: usize = 24;
const C: usize = 3;
const D: usize = 4;

struct Batch {
    x: Array,
    labels: Vec<u16>,
    weak: Vec<bool>,
    teacher: Array,
    guidance: GuidanceTargets,
    out_of_image: Vec<usize>,
}

fn objective(
    tape: &mut Tape,
    params: &ParamVector,
    spec: &MlpSpec,
    b: &Batch,
) -> fovguide::Result<(
    fovguide::numerics::Var,
    fovguide::numerics::ParamVars,
    fovguide::losses3d::LossBundle,
)> {
    let vars = tape.watch(params);
    let x = tape.constant(b.x.clone());
    let out = mlp_forward(tape, &vars, x, spec)?;
    let pred = Prediction::split(tape, out, C)?;
    let terms = LossTerms {
        supervised: supervised_ce(tape, pred.logits, &b.labels, &b.weak)?,
        consistency: Some(mt_consistency(tape, pred.logits, &b.teacher, &b.weak)?),
        image_guidance: Some(ig_distill(tape, pred.aux, &b.guidance)?.value),
        contrastive: Some(one_way_contrastive(tape, pred.aux, &b.guidance, &b.out_of_image, 0.1)?.value),
    };
    let (root, bundle) = total_loss(tape, &terms, 0.001)?;
    Ok((root, vars, bundle))
}

fn main() -> fovguide::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = MlpSpec::new("net.", vec![5, 8, C + D]);
    let params = spec.init(&mut rng);
    let mut randn = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let in_image: Vec<usize> = (0..N).step_by(3).collect();
    let batch = Batch {
        x: Array::matrix(N, 5, randn(N * 5))?,
        labels: (0..N).map(|i| (i % C) as u16).collect(),
        weak: (0..N).map(|i| i % 4 == 0).collect(),
        teacher: Array::matrix(N, C, randn(N * C))?,
        guidance: GuidanceTargets {
            features: Array::matrix(in_image.len(), D, randn(in_image.len() * D))?,
            in_image: in_image.clone(),
            teacher_classes: (0..N).map(|i| ((i / 2) % C) as u16).collect(),
        },
        out_of_image: (0..N).filter(|i| i % 3 != 0).collect(),
    };

    let mut tape = Tape::new();
    let (root, vars, bundle) = objective(&mut tape, &params, &spec, &batch)?;
    println!("{bundle:#?}");
    let analytic = tape.grad(root, &vars)?;
    let numeric = finite_difference(&params, 1e-5, |p| {
        let mut t = Tape::new();
        let (r, _, _) = objective(&mut t, p, &spec, &batch).expect("objective");
        t.value(r).item()
    });
    println!(
        "{} parameters, worst relative gradient error {:.2e}",
        params.num_scalars(),
        max_relative_error(&analytic, &numeric, 1e-6)
    );
    Ok(())
}
