//! Dense arrays, a reverse-mode tape and the small tanh MLPs built on it.

mod array;
pub mod container;
mod tape;

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

pub use array::{log_softmax_rows, logsumexp, softmax_rows, Array};
pub use container::{read_named_arrays, write_named_arrays, NamedArrays};
pub use tape::{ParamVars, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },
    #[error("gradient root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter sets differ: {0}")]
    Incompatible(String),
    #[error("axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
}

/// Named collection of parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    arrays: BTreeMap<String, Array>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamVector {
        ParamVector {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamVector) {
        self.arrays.extend(other.arrays);
    }

    /// Fails unless both vectors hold the same names with the same shapes.
    pub fn check_compatible(&self, other: &ParamVector) -> Result<(), NumericsError> {
        for (name, a) in &self.arrays {
            match other.arrays.get(name) {
                None => return Err(NumericsError::MissingParam(name.clone())),
                Some(b) if a.shape() != b.shape() => {
                    return Err(NumericsError::ShapeMismatch {
                        context: format!("parameter `{name}`"),
                        expected: format!("{:?}", a.shape()),
                        found: format!("{:?}", b.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = other.arrays.keys().find(|k| !self.arrays.contains_key(*k)) {
            return Err(NumericsError::Incompatible(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// `self += scale * other` for every parameter.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) -> Result<(), NumericsError> {
        self.check_compatible(other)?;
        for (name, a) in self.arrays.iter_mut() {
            a.axpy(scale, &other.arrays[name]);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(Array::all_finite)
    }
}

/// Softmax along `axis` of an arbitrary-rank array.
pub fn softmax(x: &Array, axis: usize) -> Result<Array, NumericsError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(NumericsError::BadAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let m = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..len {
                let e = (data[at(j)] - m).exp();
                data[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                data[at(j)] /= s;
            }
        }
    }
    Ok(out)
}

/// Layer widths of a tanh MLP, input first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub layers: Vec<usize>,
    pub prefix: String,
}

impl MlpSpec {
    pub fn new(prefix: impl Into<String>, layers: Vec<usize>) -> Self {
        Self {
            layers,
            prefix: prefix.into(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layers.last().expect("at least one layer width")
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}b{layer}", self.prefix)
    }

    /// Uniform Glorot initialisation; biases start at zero.
    pub fn init(&self, rng: &mut impl Rng) -> ParamVector {
        let mut p = ParamVector::new();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layers[l], self.layers[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            p.insert(
                self.weight_name(l),
                Array::matrix(fan_in, fan_out, w).expect("consistent init shape"),
            );
            p.insert(self.bias_name(l), Array::zeros(&[fan_out]));
        }
        p
    }

    fn layer_params<'a>(&self, params: &'a ParamVector, l: usize) -> Result<(&'a Array, &'a Array), NumericsError> {
        let w = params
            .get(&self.weight_name(l))
            .ok_or_else(|| NumericsError::MissingParam(self.weight_name(l)))?;
        let b = params
            .get(&self.bias_name(l))
            .ok_or_else(|| NumericsError::MissingParam(self.bias_name(l)))?;
        let (fi, fo) = (self.layers[l], self.layers[l + 1]);
        if w.shape() != [fi, fo] || b.shape() != [fo] {
            return Err(NumericsError::ShapeMismatch {
                context: format!("layer {l} of `{}`", self.prefix),
                expected: format!("w [{fi}, {fo}], b [{fo}]"),
                found: format!("w {:?}, b {:?}", w.shape(), b.shape()),
            });
        }
        Ok((w, b))
    }
}

/// Records a tanh MLP forward pass on `tape`; the last layer is linear.
pub fn mlp_forward(tape: &mut Tape, params: &ParamVars, input: Var, spec: &MlpSpec) -> Result<Var, NumericsError> {
    let width = tape.value(input).cols();
    if width != spec.input_dim() {
        return Err(NumericsError::ShapeMismatch {
            context: format!("input to layer 0 of `{}`", spec.prefix),
            expected: format!("{} features", spec.input_dim()),
            found: format!("{width}"),
        });
    }
    let mut h = input;
    for l in 0..spec.num_layers() {
        let w = params.get(&spec.weight_name(l))?;
        let b = params.get(&spec.bias_name(l))?;
        let z = tape.matmul(h, w).map_err(|e| layer_err(spec, l, e))?;
        h = tape.add_bias(z, b).map_err(|e| layer_err(spec, l, e))?;
        if l + 1 < spec.num_layers() {
            h = tape.tanh(h);
        }
    }
    Ok(h)
}

fn layer_err(spec: &MlpSpec, l: usize, e: NumericsError) -> NumericsError {
    match e {
        NumericsError::ShapeMismatch { expected, found, .. } => NumericsError::ShapeMismatch {
            context: format!("layer {l} of `{}`", spec.prefix),
            expected,
            found,
        },
        other => other,
    }
}

/// Tape-free forward pass with identical arithmetic to [`mlp_forward`].
pub fn mlp_eval(params: &ParamVector, input: &Array, spec: &MlpSpec) -> Result<Array, NumericsError> {
    if input.cols() != spec.input_dim() {
        return Err(NumericsError::ShapeMismatch {
            context: format!("input to layer 0 of `{}`", spec.prefix),
            expected: format!("{} features", spec.input_dim()),
            found: format!("{}", input.cols()),
        });
    }
    let mut h = input.clone();
    for l in 0..spec.num_layers() {
        let (w, b) = spec.layer_params(params, l)?;
        let mut z = h.matmul(w).map_err(|e| layer_err(spec, l, e))?;
        let last = l + 1 == spec.num_layers();
        for i in 0..z.rows() {
            for (v, bv) in z.row_mut(i).iter_mut().zip(b.data()) {
                *v += bv;
                if !last {
                    *v = v.tanh();
                }
            }
        }
        h = z;
    }
    Ok(h)
}

/// Central finite-difference gradient of `f` at `params`.
pub fn finite_difference(params: &ParamVector, step: f64, mut f: impl FnMut(&ParamVector) -> f64) -> ParamVector {
    let mut out = ParamVector::new();
    let mut probe = params.clone();
    for (name, a) in params.iter() {
        let mut g = Array::zeros(a.shape());
        for i in 0..a.len() {
            let orig = a.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.insert(name.clone(), g);
    }
    out
}

/// Largest relative discrepancy between two gradients, with absolute
/// floor `floor` in the denominator.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, x) in a.iter() {
        let Some(y) = b.get(name) else {
            return f64::INFINITY;
        };
        for (p, q) in x.data().iter().zip(y.data()) {
            let denom = p.abs().max(q.abs()).max(floor);
            worst = worst.max((p - q).abs() / denom);
        }
    }
    worst
}
