//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its forward value and the
//! indices of its parents. Nodes are only ever appended, so insertion
//! order is a topological order and [`Tape::backward`] is a single
//! reverse sweep.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::KernelError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Softplus,
    Sin,
    Cos,
    Square,
    Sqrt,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Softplus => "softplus",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Relu => x.max(0.0),
            Unary::Gelu => x * std_normal_cdf(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// d(out)/d(in) from input `x` and output `y`.
    fn slope(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RepeatEach(Var, usize),
    Tile(Var, usize),
    GroupSum(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor shaped like its value; zeros if `v` did
    /// not receive any gradient.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let value = tape.value(v);
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; value.len()]);
        Tensor::new(value.shape().to_vec(), data).expect("gradient shape")
    }
}

/// Per-parameter gradients detached from a tape, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn add_assign(&mut self, other: &ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(s) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(s).for_each(|(a, b)| *a += b),
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Append-only record of tensor operations.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
    non_finite: Option<(usize, &'static str)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &str, a: &Tensor, b: &Tensor) -> KernelError {
    KernelError::ShapeMismatch(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sum `grad` (shaped `[r, c]`) down to `[tr, tc]` along broadcast axes.
fn reduce_to(grad: &[f64], r: usize, c: usize, tr: usize, tc: usize) -> Vec<f64> {
    if tr == r && tc == c {
        return grad.to_vec();
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let tj = if tc == 1 { 0 } else { j };
            out[ti * tc + tj] += grad[i * c + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
            non_finite: None,
        }
    }

    /// A tape whose parameters are constants (inference only).
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<(), KernelError> {
        match self.non_finite {
            Some((node, op)) => Err(KernelError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn as_matrix(t: Tensor) -> Tensor {
        if t.rank() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            Tensor::matrix(r, c, t.into_data())
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Self::as_matrix(value), Op::Leaf, false, "constant")
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Self::as_matrix(value), Op::Leaf, true, "leaf")
    }

    /// Parameter leaf; repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = Self::as_matrix(store.value(id).clone());
        let track = self.track_params;
        let v = self.push(value, Op::Leaf, track, "param");
        self.params.insert(id, v);
        v
    }

    /// Gradients of all parameters touched on this tape.
    pub fn param_grads(&self, grads: &Gradients, n_params: usize) -> ParamGrads {
        let mut out = vec![None; n_params];
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                out[id.index()] = Some(g.to_vec());
            }
        }
        ParamGrads { grads: out }
    }

    // ---------------------------------------------------------------
    // linear algebra
    // ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg, "matmul"))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::MatMulNt(a, b),
            rg,
            "matmul_nt",
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(c, r, out), Op::Transpose(a), rg, "transpose")
    }

    // ---------------------------------------------------------------
    // broadcasting elementwise binaries
    // ---------------------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca, rb, cb) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        let r = broadcast_dim(ra, rb).ok_or_else(|| mismatch(name, ta, tb))?;
        let c = broadcast_dim(ca, cb).ok_or_else(|| mismatch(name, ta, tb))?;
        let mut out = Vec::with_capacity(r * c);
        let (da, db) = (ta.data(), tb.data());
        for i in 0..r {
            let ia = if ra == 1 { 0 } else { i };
            let ib = if rb == 1 { 0 } else { i };
            for j in 0..c {
                let ja = if ca == 1 { 0 } else { j };
                let jb = if cb == 1 { 0 } else { j };
                out.push(f(da[ia * ca + ja], db[ib * cb + jb]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, out), op, rg, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        let rg = self.rg(a);
        self.push(out, Op::Shift(a), rg, "add_scalar")
    }

    // ---------------------------------------------------------------
    // unary
    // ---------------------------------------------------------------

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.value(a).map(|v| kind.eval(v));
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, kind), rg, kind.name())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// Clamp into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg, "clamp")
    }

    // ---------------------------------------------------------------
    // reductions
    // ---------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(ta.row_slice(i)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(1, c, out), Op::SumRows(a), rg, "sum_rows")
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.value(a).rows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r)
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let r = ta.rows();
        let out: Vec<f64> = (0..r).map(|i| ta.row_slice(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, 1, out), Op::SumCols(a), rg, "sum_cols")
    }

    // ---------------------------------------------------------------
    // structure
    // ---------------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let first = *parts
            .first()
            .ok_or_else(|| KernelError::ShapeMismatch("concat_cols of nothing".into()))?;
        let r = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(mismatch("concat_cols", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(r, cols, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
            "concat_cols",
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let first = *parts
            .first()
            .ok_or_else(|| KernelError::ShapeMismatch("concat_rows of nothing".into()))?;
        let c = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(rows, c, out),
            Op::ConcatRows(parts.to_vec()),
            rg,
            "concat_rows",
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, KernelError> {
        let ta = self.value(a);
        if start >= end || end > ta.cols() {
            return Err(KernelError::ShapeMismatch(format!(
                "slice_cols {start}..{end} of {:?}",
                ta.shape()
            )));
        }
        let r = ta.rows();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&ta.row_slice(i)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(r, end - start, out),
            Op::SliceCols(a, start),
            rg,
            "slice_cols",
        ))
    }

    pub fn col(&mut self, a: Var, j: usize) -> Result<Var, KernelError> {
        self.slice_cols(a, j, j + 1)
    }

    /// Rows picked by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, KernelError> {
        let ta = self.value(a);
        let c = ta.cols();
        if idx.is_empty() {
            return Err(KernelError::ShapeMismatch("gather_rows of nothing".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= ta.rows() {
                return Err(KernelError::ShapeMismatch(format!(
                    "row {i} out of {:?}",
                    ta.shape()
                )));
            }
            out.extend_from_slice(ta.row_slice(i));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, out),
            Op::GatherRows(a, idx.to_vec()),
            rg,
            "gather_rows",
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, KernelError> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, KernelError> {
        let ta = self.value(a);
        if ta.len() != rows * cols {
            return Err(KernelError::ShapeMismatch(format!(
                "reshape {:?} to [{rows}, {cols}]",
                ta.shape()
            )));
        }
        let out = Tensor::matrix(rows, cols, ta.data().to_vec());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg, "reshape"))
    }

    /// `[r, c] -> [r, c*k]`, each column repeated `k` times in place.
    pub fn repeat_each_col(&mut self, a: Var, k: usize) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(r * c * k);
        for &v in ta.data() {
            out.extend(std::iter::repeat_n(v, k));
        }
        let rg = self.rg(a);
        self.push(
            Tensor::matrix(r, c * k, out),
            Op::RepeatEach(a, k),
            rg,
            "repeat_each_col",
        )
    }

    /// `[r, c] -> [r, c*k]`, the whole row repeated `k` times.
    pub fn tile_cols(&mut self, a: Var, k: usize) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(r * c * k);
        for i in 0..r {
            for _ in 0..k {
                out.extend_from_slice(ta.row_slice(i));
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c * k, out), Op::Tile(a, k), rg, "tile_cols")
    }

    /// `[r, c*k] -> [r, c]`, summing consecutive groups of `k` columns.
    pub fn group_sum_cols(&mut self, a: Var, k: usize) -> Result<Var, KernelError> {
        let ta = self.value(a);
        let (r, ck) = (ta.rows(), ta.cols());
        if k == 0 || ck % k != 0 {
            return Err(KernelError::ShapeMismatch(format!(
                "group_sum_cols by {k} of {:?}",
                ta.shape()
            )));
        }
        let out: Vec<f64> = ta.data().chunks(k).map(|g| g.iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(r, ck / k, out),
            Op::GroupSum(a, k),
            rg,
            "group_sum_cols",
        ))
    }

    // ---------------------------------------------------------------
    // normalizations
    // ---------------------------------------------------------------

    /// Row-wise softmax with max subtraction. `mask` (same shape, nonzero =
    /// keep) excludes entries; a fully masked row yields zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var, KernelError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if let Some(m) = mask {
            if m.rows() != r || m.cols() != c {
                return Err(mismatch("softmax mask", ta, m));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = ta.row_slice(i);
            let keep = |j: usize| mask.is_none_or(|m| m.data()[i * c + j] != 0.0);
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, c, out), Op::Softmax(a), rg, "softmax"))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = ta.row_slice(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, out), Op::LogSoftmax(a), rg, "log_softmax")
    }

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    /// Row-wise layer normalization with affine `gain`/`bias` of shape `[1, c]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, KernelError> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if c < 2 {
            return Err(KernelError::ShapeMismatch(
                "layer_norm needs at least two features".into(),
            ));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != c || tb.len() != c {
            return Err(mismatch("layer_norm affine", tx, tg));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + Self::LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        ))
    }

    // ---------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, KernelError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(KernelError::ShapeMismatch(format!(
                "backward from non-scalar {:?}",
                lv.shape()
            )));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let n = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let (r, c) = (out.rows(), out.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                self.acc_with(grads, *a, |ga| gemm_nt_acc(g, tb.data(), ga, r, c, k));
                self.acc_with(grads, *b, |gb| gemm_tn_acc(ta.data(), g, gb, r, k, c));
            }
            Op::MatMulNt(a, b) => {
                // out[m,n] = a[m,k] b[n,k]^T
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                self.acc_with(grads, *a, |ga| gemm_acc(g, tb.data(), ga, r, c, k));
                self.acc_with(grads, *b, |gb| gemm_tn_acc(g, ta.data(), gb, r, c, k));
            }
            Op::Transpose(a) => {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = reduce_to(g, r, c, ta.rows(), ta.cols());
                self.acc(grads, *a, ga);
                let mut gb = reduce_to(g, r, c, tb.rows(), tb.cols());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                self.acc(grads, *b, gb);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ra, ca, rb, cb) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
                let mut full_a = vec![0.0; r * c];
                let mut full_b = vec![0.0; r * c];
                for i in 0..r {
                    let ia = if ra == 1 { 0 } else { i };
                    let ib = if rb == 1 { 0 } else { i };
                    for j in 0..c {
                        let ja = if ca == 1 { 0 } else { j };
                        let jb = if cb == 1 { 0 } else { j };
                        let av = ta.data()[ia * ca + ja];
                        let bv = tb.data()[ib * cb + jb];
                        let gv = g[i * c + j];
                        if is_div {
                            full_a[i * c + j] = gv / bv;
                            full_b[i * c + j] = -gv * av / (bv * bv);
                        } else {
                            full_a[i * c + j] = gv * bv;
                            full_b[i * c + j] = gv * av;
                        }
                    }
                }
                if self.rg(*a) {
                    self.acc(grads, *a, reduce_to(&full_a, r, c, ra, ca));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, reduce_to(&full_b, r, c, rb, cb));
                }
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, g.iter().map(|v| v * k).collect());
            }
            Op::Shift(a) => self.acc(grads, *a, g.to_vec()),
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = out.data();
                let ga = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(gv, (&xv, &yv))| gv * kind.slope(xv, yv))
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::SumRows(a) => {
                let ra = self.value(*a).rows();
                let mut ga = Vec::with_capacity(ra * c);
                for _ in 0..ra {
                    ga.extend_from_slice(g);
                }
                self.acc(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let ca = self.value(*a).cols();
                let ga = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, ca))
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * c + offset..i * c + offset + pc]);
                        }
                        self.acc(grads, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        self.acc(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let ca = self.value(*a).cols();
                let start = *start;
                self.acc_with(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * ca + start + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                self.acc_with(grads, *a, |ga| {
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Softmax(a) => {
                let y = out.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let gsum: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        ga[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gsum;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gn = self.value(*gain).data();
                if self.rg(*gain) {
                    let mut gg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    self.acc(grads, *gain, gg);
                }
                if self.rg(*bias) {
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    self.acc(grads, *bias, gb);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; r * c];
                    let cf = c as f64;
                    for i in 0..r {
                        let dh: Vec<f64> = (0..c).map(|j| g[i * c + j] * gn[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cf;
                        let mean_dh_h = (0..c).map(|j| dh[j] * xhat[i * c + j]).sum::<f64>() / cf;
                        for j in 0..c {
                            gx[i * c + j] =
                                inv_std[i] * (dh[j] - mean_dh - xhat[i * c + j] * mean_dh_h);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::RepeatEach(a, k) => {
                let ga = g.chunks(*k).map(|ch| ch.iter().sum()).collect();
                self.acc(grads, *a, ga);
            }
            Op::Tile(a, k) => {
                let ca = c / k;
                let mut ga = vec![0.0; r * ca];
                for i in 0..r {
                    for t in 0..*k {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * c + t * ca + j];
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::GroupSum(a, k) => {
                let ga = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, *k))
                    .collect();
                self.acc(grads, *a, ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_returns_operand() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let v = t.leaf(Tensor::column(&[3.0, -4.0]));
        let y = t.matmul(i, v).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, -4.0]);
    }

    #[test]
    fn sum_of_zeros_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 3));
        let s = t.sum(x);
        assert_eq!(t.scalar(s), 0.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(KernelError::ShapeMismatch(_))));
        let c = t.constant(Tensor::zeros(3, 2));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(3, 2));
        let b = t.leaf(Tensor::row(&[1.0, 2.0]));
        let y = t.add(x, b).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(-1.0));
        let y = t.ln(x);
        assert!(matches!(
            t.check_finite(),
            Err(KernelError::NonFinite { op: "ln", .. })
        ));
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]));
        let mask = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]]);
        let y = t.softmax_rows(x, Some(&mask)).unwrap();
        let v = t.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(0, 0) + v.get(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(v.row_slice(1), &[0.0, 0.0, 0.0]);
    }
}
