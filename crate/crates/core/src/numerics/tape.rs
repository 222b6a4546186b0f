//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Every primitive records its inputs and whatever it needs for the
//! backward pass. A [`Var`] is only an index into the tape that created it,
//! so values are cheap to copy around while a graph is being built.

use std::collections::BTreeMap;

use super::array::{log_softmax_rows, logsumexp, matmul_into, softmax_rows, Array};
use super::{NumericsError, ParamVector};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    SumLastAxis(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    PickCols(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<f64>),
    LogSumExpMasked(Var, Vec<bool>),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Named leaves registered on a tape, mirroring a [`ParamVector`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, NumericsError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Append-only record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant; no gradient is ever produced for it.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers every entry of `params` as a leaf.
    pub fn watch(&mut self, params: &ParamVector) -> ParamVars {
        let vars = params
            .iter()
            .map(|(name, a)| (name.clone(), self.leaf(a.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_same(&self, ctx: &str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                context: ctx.into(),
                expected: format!("{sa:?}"),
                found: format!("{sb:?}"),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a[n×k] · b[m×k]ᵀ`, i.e. all pairwise row dot products.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(NumericsError::ShapeMismatch {
                context: "matmul_t".into(),
                expected: format!("{k} columns"),
                found: format!("{}", bv.cols()),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = av.row(i);
            for j in 0..m {
                out[i * m + j] = ar.iter().zip(bv.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        let out = Array::matrix(n, m, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.len() != av.cols() {
            return Err(NumericsError::ShapeMismatch {
                context: "add_bias".into(),
                expected: format!("{} bias entries", av.cols()),
                found: format!("{}", bv.len()),
            });
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBias(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Ln(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ wᵢ aᵢ` over all entries, as a scalar node.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if weights.len() != av.len() {
            return Err(NumericsError::ShapeMismatch {
                context: "weighted_sum".into(),
                expected: format!("{} weights", av.len()),
                found: format!("{}", weights.len()),
            });
        }
        let s = av.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Array::scalar(s), Op::WeightedSum(a, weights), rg))
    }

    /// Collapses the last axis by summation: `[n×m] → [n]`.
    pub fn sum_last_axis(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Array::vector((0..av.rows()).map(|i| av.row(i).iter().sum()).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumLastAxis(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(NumericsError::ShapeMismatch {
                context: "gather_rows".into(),
                expected: format!("row index < {}", av.rows()),
                found: format!("{bad}"),
            });
        }
        let out = av.gather_rows(&idx);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx), rg))
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(NumericsError::ShapeMismatch {
                context: "slice_cols".into(),
                expected: format!("range within 0..{}", av.cols()),
                found: format!("{start}..{end}"),
            });
        }
        let n = av.rows();
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&av.row(i)[start..end]);
        }
        let out = Array::matrix(n, end - start, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start, end), rg))
    }

    /// Picks `a[i, idx[i]]` from each row: `[n×m] → [n]`.
    pub fn pick_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if idx.len() != av.rows() || idx.iter().any(|&j| j >= av.cols()) {
            return Err(NumericsError::ShapeMismatch {
                context: "pick_cols".into(),
                expected: format!("{} indices below {}", av.rows(), av.cols()),
                found: format!("{} indices", idx.len()),
            });
        }
        let out = Array::vector(idx.iter().enumerate().map(|(i, &j)| av.get2(i, j)).collect());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::PickCols(a, idx), rg))
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for v in r.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::L2NormalizeRows(a, norms), rg)
    }

    /// Row-wise log-sum-exp restricted to entries where `mask` is set.
    /// Rows with no selected entry yield `-inf`.
    pub fn logsumexp_masked(&mut self, a: Var, mask: Vec<bool>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(NumericsError::ShapeMismatch {
                context: "logsumexp_masked".into(),
                expected: format!("{} mask entries", av.len()),
                found: format!("{}", mask.len()),
            });
        }
        let m = av.cols();
        let mut buf = Vec::with_capacity(m);
        let out = (0..av.rows())
            .map(|i| {
                buf.clear();
                buf.extend(
                    av.row(i)
                        .iter()
                        .zip(&mask[i * m..(i + 1) * m])
                        .filter(|(_, &k)| k)
                        .map(|(x, _)| *x),
                );
                logsumexp(&buf)
            })
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Array::vector(out), Op::LogSumExpMasked(a, mask), rg))
    }

    /// Back-propagates from the scalar `root` and returns the gradient for
    /// every registered parameter.
    pub fn grad(&self, root: Var, params: &ParamVars) -> Result<ParamVector, NumericsError> {
        let grads = self.backward(root)?;
        let mut out = ParamVector::new();
        for (name, v) in params.iter() {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Array::zeros(self.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Gradient with respect to a single node.
    pub fn grad_of(&self, root: Var, wrt: Var) -> Result<Array, NumericsError> {
        let mut grads = self.backward(root)?;
        Ok(grads[wrt.0]
            .take()
            .unwrap_or_else(|| Array::zeros(self.value(wrt).shape())))
    }

    fn backward(&self, root: Var) -> Result<Vec<Option<Array>>, NumericsError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(NumericsError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::full(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    // g[n×m] · bᵀ[m×k]
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        let gr = g.row(i);
                        for p in 0..k {
                            ga[i * k + p] = gr.iter().zip(bv.row(p)).map(|(x, y)| x * y).sum();
                        }
                    }
                    let ga = Array::new(av.shape().to_vec(), ga).expect("matmul grad shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    // aᵀ[k×n] · g[n×m]
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let ar = av.row(i);
                        let gr = g.row(i);
                        for (p, &x) in ar.iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(gr) {
                                *o += x * gv;
                            }
                        }
                    }
                    let gb = Array::new(bv.shape().to_vec(), gb).expect("matmul grad shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_into(g.data(), bv.data(), &mut ga, n, m, k);
                    let ga = Array::new(av.shape().to_vec(), ga).expect("matmul_t grad shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; m * k];
                    for i in 0..n {
                        let ar = av.row(i);
                        for j in 0..m {
                            let gv = g.get2(i, j);
                            for (o, &x) in gb[j * k..(j + 1) * k].iter_mut().zip(ar) {
                                *o += gv * x;
                            }
                        }
                    }
                    let gb = Array::new(bv.shape().to_vec(), gb).expect("matmul_t grad shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let bv = self.value(*b);
                    let mut gb = vec![0.0; bv.len()];
                    for i in 0..g.rows() {
                        for (o, x) in gb.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    let gb = Array::new(bv.shape().to_vec(), gb).expect("bias grad shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, e| gv * e)),
            Op::Ln(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gv, x| gv / x));
            }
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let yr = y.row(i);
                    let dot: f64 = g.row(i).iter().zip(yr).map(|(x, s)| x * s).sum();
                    for (o, &s) in ga.row_mut(i).iter_mut().zip(yr) {
                        *o = s * (*o - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    for (o, &ls) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                        *o -= ls.exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                self.accumulate(grads, *a, Array::full(shape, g.item()));
            }
            Op::WeightedSum(a, w) => {
                let shape = self.value(*a).shape().to_vec();
                let gv = g.item();
                let ga = Array::new(shape, w.iter().map(|x| x * gv).collect()).expect("weighted_sum grad shape");
                self.accumulate(grads, *a, ga);
            }
            Op::SumLastAxis(a) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut ga = Array::zeros(av.shape());
                for i in 0..av.rows() {
                    ga.row_mut(i).fill(g.data()[i]);
                }
                debug_assert_eq!(ga.cols(), m);
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                if self.requires_grad(*a) {
                    let mut ga = Array::zeros(self.value(*a).shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array::zeros(self.value(*a).shape());
                for i in 0..g.rows() {
                    ga.row_mut(i)[*start..*end].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PickCols(a, idx) => {
                let mut ga = Array::zeros(self.value(*a).shape());
                for (i, &j) in idx.iter().enumerate() {
                    ga.row_mut(i)[j] += g.data()[i];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut ga = g.clone();
                for (i, &norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let dot: f64 = g.row(i).iter().zip(yr).map(|(x, s)| x * s).sum();
                    for (o, &s) in ga.row_mut(i).iter_mut().zip(yr) {
                        *o = (*o - s * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSumExpMasked(a, mask) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut ga = Array::zeros(av.shape());
                for i in 0..av.rows() {
                    let lse = y.data()[i];
                    if !lse.is_finite() {
                        continue;
                    }
                    let gv = g.data()[i];
                    let xr = av.row(i);
                    let mr = &mask[i * m..(i + 1) * m];
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        if mr[j] {
                            *o = gv * (xr[j] - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}
