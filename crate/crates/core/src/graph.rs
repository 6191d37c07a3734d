//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are plain
//! `Array2<f64>`; scalars are `1×1` matrices. [`Tape::backward`] walks the
//! tape in reverse and returns the gradient of a scalar output with respect
//! to every node that needs one.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::ParamId;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Floor used by [`Tape::log`]; gradients below the floor are zero.
pub const LOG_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddConst(Var),
    MulConst(Var, Arc<Array2<f64>>),
    Tanh(Var),
    Sigmoid(Var),
    Swish(Var),
    Exp(Var),
    Log(Var),
    Cos(Var),
    LogSigmoid(Var),
    Powf(Var, f64),
    SumAll(Var),
    RowSum(Var),
    ColSum(Var),
    ColMeanCenter(Var),
    RowNormalize(Var, Array2<f64>),
    Gather(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Softmax(Var),
    Time2Vec(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    /// Gradient of the output with respect to `v`, if it was reached.
    pub fn of(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter leaf on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Sums a gradient down to `shape`, undoing numpy-style broadcasting.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted (e.g. for saliency).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable parameter leaf. Repeated calls with the same id return the
    /// same node so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId, value: &Array2<f64>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t().dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulTN(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×n row");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// `a (m×n) + col (m×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "add_col expects an m×1 column");
        let v = self.value(a) + self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::AddCol(a, col), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an m×1 column");
        let v = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "div_col expects an m×1 column");
        let v = self.value(a) / self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::DivCol(a, col), ng)
    }

    /// Multiplies `a` by the `1×1` scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a 1×1 scalar");
        let v = self.value(a) * self.scalar(s);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::ScaleBy(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let ng = self.ng(a);
        self.push(v, Op::Shift(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.shift(n, 1.0)
    }

    /// Adds a detached constant (broadcastable to `a`). The gradient passes
    /// through unchanged; used for numerical stabilisers that cancel exactly.
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = self.value(a) + c;
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    /// Elementwise product with a constant (broadcastable to `a`).
    pub fn mul_const(&mut self, a: Var, c: Arc<Array2<f64>>) -> Var {
        let v = self.value(a) * &*c;
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// `x · sigmoid(x)`
    pub fn swish(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Swish(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(LOG_FLOOR).ln());
        let ng = self.ng(a);
        self.push(v, Op::Log(a), ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::cos);
        let ng = self.ng(a);
        self.push(v, Op::Cos(a), ng)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(log_sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::LogSigmoid(a), ng)
    }

    /// Elementwise power with a constant exponent; `x^0 = 1` everywhere.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| if p == 0.0 { 1.0 } else { x.powf(p) });
        let ng = self.ng(a);
        self.push(v, Op::Powf(a, p), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an `m×1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    /// Column sums as a `1×n` row.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::ColSum(a), ng)
    }

    /// Subtracts each column's mean.
    pub fn col_mean_center(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mean = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let v = x - &mean;
        let ng = self.ng(a);
        self.push(v, Op::ColMeanCenter(a), ng)
    }

    /// Divides each row by its l2 norm (rows with zero norm stay zero).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms = x
            .map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_EPS))
            .insert_axis(Axis(1));
        let v = x / &norms;
        let ng = self.ng(a);
        self.push(v, Op::RowNormalize(a, norms), ng)
    }

    /// Selects rows of `a` by index (embedding lookup).
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((idx.len(), x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&x.row(i));
        }
        let ng = self.ng(a);
        self.push(v, Op::Gather(a, idx), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Array2::zeros((rows, total));
        let mut off = 0;
        for &p in parts {
            let w = self.shape(p).1;
            v.slice_mut(s![.., off..off + w]).assign(self.value(p));
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start, end), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Array2::from_shape_vec(shape, flat).expect("reshape size mismatch");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Row-wise softmax. `mask[i][j] == false` excludes entry `j` of row `i`;
    /// a row with no allowed entry yields zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&Array2<bool>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros(x.dim());
        for (i, (row, mut out)) in x.outer_iter().zip(v.outer_iter_mut()).enumerate() {
            let allowed = |j: usize| mask.map_or(true, |m| m[[i, j]]);
            let mut max = f64::NEG_INFINITY;
            for (j, &val) in row.iter().enumerate() {
                if allowed(j) && val > max {
                    max = val;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (j, &val) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (val - max).exp();
                    out[j] = e;
                    total += e;
                }
            }
            out.mapv_inplace(|e| e / total);
        }
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    /// Time2vec activation: column 0 passes through, the rest go through cos.
    pub fn time2vec_act(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.slice_mut(s![.., 1..]).mapv_inplace(f64::cos);
        let ng = self.ng(a);
        self.push(v, Op::Time2Vec(a), ng)
    }

    /// Computes gradients of the scalar `output` with respect to every node
    /// that needs one.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::MatMulTN(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, self.value(*b).dot(&g.t()));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, r) => {
                    if self.ng(*r) {
                        acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddCol(a, c) => {
                    if self.ng(*c) {
                        acc(&mut grads, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulCol(a, c) => {
                    if self.ng(*c) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, *c, gc);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*c));
                    }
                }
                Op::DivCol(a, c) => {
                    let cv = self.value(*c);
                    if self.ng(*c) {
                        // d(a/c)/dc = -y/c
                        let gc = -((&g * y) / cv).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, *c, gc);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g / cv);
                    }
                }
                Op::ScaleBy(a, sv) => {
                    if self.ng(*sv) {
                        let gs = (&g * self.value(*a)).sum();
                        acc(&mut grads, *sv, Array2::from_elem((1, 1), gs));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g * self.scalar(*sv));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Shift(a) | Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::MulConst(a, c) => {
                    let ga = reduce_to(&g * &**c, self.shape(*a));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &t| *g *= 1.0 - t * t);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &s| *g *= s * (1.0 - s));
                    acc(&mut grads, *a, ga);
                }
                Op::Swish(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        let s = sigmoid(x);
                        *g *= s + x * s * (1.0 - s);
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * y),
                Op::Log(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        *g = if x > LOG_FLOOR { *g / x } else { 0.0 };
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Cos(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| *g *= -x.sin());
                    acc(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| *g *= 1.0 - sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Powf(a, p) => {
                    let mut ga = g;
                    let p = *p;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        *g = if p == 0.0 { 0.0 } else { *g * p * x.powf(p - 1.0) };
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let ga = Array2::zeros(self.shape(*a)) + &g;
                    acc(&mut grads, *a, ga);
                }
                Op::ColSum(a) => {
                    let ga = Array2::zeros(self.shape(*a)) + &g;
                    acc(&mut grads, *a, ga);
                }
                Op::ColMeanCenter(a) => {
                    let mean = g.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
                    acc(&mut grads, *a, &g - &mean);
                }
                Op::RowNormalize(a, norms) => {
                    // d(x/|x|) = (g - y (y·g)) / |x|
                    let dots = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = (&g - &(y * &dots)) / norms;
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &row) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(row);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(self.shape(*a), flat).expect("reshape");
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    // dx = y ∘ (g - (g·y))
                    let dots = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dots);
                    acc(&mut grads, *a, ga);
                }
                Op::Time2Vec(a) => {
                    let mut ga = g;
                    let x = self.value(*a);
                    Zip::from(ga.slice_mut(s![.., 1..]))
                        .and(x.slice(s![.., 1..]))
                        .for_each(|g, &x| *g *= -x.sin());
                    acc(&mut grads, *a, ga);
                }
            }
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort_by_key(|(k, _)| *k);
        Grads { grads, params }
    }
}

/// Central finite-difference check helpers shared by unit and integration
/// tests.
pub mod check {
    use ndarray::Array2;

    /// Relative error `|a-b| / max(|a|+|b|, floor)`.
    pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(floor)
    }

    /// Numerical gradient of `f` at `x` by central differences.
    pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = xp[[r, c]];
            xp[[r, c]] = orig + h;
            let fp = f(&xp);
            xp[[r, c]] = orig - h;
            let fm = f(&xp);
            xp[[r, c]] = orig;
            g[[r, c]] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Largest relative error between an analytic and a numeric gradient.
    pub fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| rel_err(a, n, 1e-6))
            .fold(0.0, f64::max)
    }
}
