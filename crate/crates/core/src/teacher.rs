//! Mean-teacher state: an exponential moving average of the student's
//! weights, evaluated without ever touching a tape.

use crate::error::{Error, Result};
use crate::numerics::{mlp_eval, Array, MlpSpec, ParamVector};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub shadow: ParamVector,
    pub alpha: f64,
    pub step: u64,
}

impl TeacherState {
    /// Starts the shadow as an exact copy of the student.
    pub fn new(student: &ParamVector, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA rate {alpha} outside [0, 1]")));
        }
        Ok(Self {
            shadow: student.clone(),
            alpha,
            step: 0,
        })
    }

    /// `shadow ← α·shadow + (1−α)·student`, then bumps the step counter.
    pub fn ema_update(&mut self, student: &ParamVector) -> Result<()> {
        self.shadow.check_compatible(student)?;
        let a = self.alpha;
        for (name, s) in self.shadow.iter_mut() {
            let theta = student.get(name).expect("checked compatible");
            for (x, &y) in s.data_mut().iter_mut().zip(theta.data()) {
                *x = a * *x + (1.0 - a) * y;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Class logits and auxiliary features of one forward pass, detached.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherPrediction {
    pub logits: Array,
    pub aux: Array,
}

/// Runs the shadow network on per-point `input`; the first `num_classes`
/// output columns are logits and the rest auxiliary features.
pub fn teacher_predict(
    state: &TeacherState,
    input: &Array,
    spec: &MlpSpec,
    num_classes: usize,
) -> Result<TeacherPrediction> {
    let out = mlp_eval(&state.shadow, input, spec)?;
    split_output(&out, num_classes)
}

pub(crate) fn split_output(out: &Array, num_classes: usize) -> Result<TeacherPrediction> {
    let width = out.cols();
    if num_classes > width {
        return Err(Error::InvalidInput(format!(
            "network emits {width} columns, fewer than {num_classes} classes"
        )));
    }
    let n = out.rows();
    let mut logits = Vec::with_capacity(n * num_classes);
    let mut aux = Vec::with_capacity(n * (width - num_classes));
    for i in 0..n {
        let r = out.row(i);
        logits.extend_from_slice(&r[..num_classes]);
        aux.extend_from_slice(&r[num_classes..]);
    }
    Ok(TeacherPrediction {
        logits: Array::matrix(n, num_classes, logits)?,
        aux: Array::matrix(n, width - num_classes, aux)?,
    })
}

/// Per-point argmax over the class logits, ties toward the lowest index.
pub fn assign_classes(logits: &Array) -> Vec<u16> {
    logits.argmax_rows().into_iter().map(|c| c as u16).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(v: f64) -> ParamVector {
        let mut p = ParamVector::new();
        p.insert("w", Array::full(&[2, 2], v));
        p
    }

    #[test]
    fn one_step_algebra() {
        let mut t = TeacherState::new(&params(0.0), 0.999).unwrap();
        t.ema_update(&params(1.0)).unwrap();
        assert!((t.shadow.get("w").unwrap().data()[0] - 0.001).abs() < 1e-15);
        assert_eq!(t.step, 1);
        let mut t = TeacherState::new(&params(3.0), 0.0).unwrap();
        t.ema_update(&params(-2.5)).unwrap();
        assert_eq!(t.shadow, params(-2.5));
        let mut t = TeacherState::new(&params(3.0), 1.0).unwrap();
        t.ema_update(&params(-2.5)).unwrap();
        assert_eq!(t.shadow, params(3.0));
    }

    #[test]
    fn rejects_mismatch_and_bad_rate() {
        let mut t = TeacherState::new(&params(0.0), 0.5).unwrap();
        let mut other = ParamVector::new();
        other.insert("w", Array::zeros(&[3, 2]));
        let err = t.ema_update(&other).unwrap_err().to_string();
        assert!(err.contains('w'), "{err}");
        assert!(TeacherState::new(&params(0.0), 1.5).is_err());
    }

    #[test]
    fn shadow_equal_to_student_gives_student_output() {
        let spec = MlpSpec::new("s.", vec![3, 5, 4]);
        let student = spec.init(&mut ChaCha8Rng::seed_from_u64(0));
        let t = TeacherState::new(&student, 0.999).unwrap();
        let x = Array::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.0, 0.0, -1.0]).unwrap();
        let p = teacher_predict(&t, &x, &spec, 2).unwrap();
        let full = mlp_eval(&student, &x, &spec).unwrap();
        assert_eq!(p.logits.row(1), &full.row(1)[..2]);
        assert_eq!(p.aux.row(1), &full.row(1)[2..]);
        assert!(teacher_predict(&t, &x, &spec, 5).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let l = Array::matrix(3, 3, vec![0.0, 1.0, 0.0, 2.0, 2.0, 1.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(assign_classes(&l), vec![1, 0, 0]);
    }
}
