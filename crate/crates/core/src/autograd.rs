//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! A [`Graph`] records every operation in evaluation order, so the tape is
//! already topologically sorted; [`Graph::backward`] walks it once in
//! reverse. Forward values are cached on the nodes, and every primitive has
//! an analytic vector-Jacobian product.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivScalar(Var, Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumCols(Var),
    MeanRows(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    ReplaceRows { base: Var, fill: Var, rows: Vec<usize> },
    ScatterRows { base: Var, src: Var, rows: Vec<usize> },
    SegmentSoftmax { x: Var, groups: Vec<usize> },
    SegmentSum { x: Var, groups: Vec<usize> },
    Mse { pred: Var, target: Tensor },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation record. Values are immutable once recorded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros of its shape if the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
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

/// `log σ(x)` evaluated without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.044715;

fn gelu_inner(x: f64) -> f64 {
    (2.0 / PI).sqrt() * (x + GELU_K * x * x * x)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner(x).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    let dinner = (2.0 / PI).sqrt() * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n × k`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ (k×m)ᵀ · b (k×n)` → `m × n`.
fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    fn push_checked(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &data)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn m2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.m2(a)?;
        let (k2, n) = self.m2(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", vec![m, n], data, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.m2(a)?;
        let (n, k2) = self.m2(b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.value(a), self.value(b)));
        }
        let data = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul_nt", vec![m, n], data, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.m2(a)?;
        let data = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(name, shape, data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        let (r1, n2) = self.m2(row)?;
        if r1 != 1 || n2 != n {
            return Err(shape_err(name, self.value(a), self.value(row)));
        }
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| f(*x, *y)))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        self.push_checked(name, vec![m, n], data, op, rg)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `m × 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        let (m2, c1) = self.m2(col)?;
        if m2 != m || c1 != 1 {
            return Err(shape_err("mul_col", self.value(a), self.value(col)));
        }
        let cv = self.value(col).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for v in &mut data[i * n..(i + 1) * n] {
                *v *= cv[i];
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push_checked("mul_col", vec![m, n], data, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push_checked("scale", shape, data, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push_checked("add_scalar", shape, data, Op::AddScalar(a), rg)
    }

    /// Divides every element of `a` by the `1 × 1` tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("div_scalar", self.value(a), self.value(s)));
        }
        let sv = self.value(s).item();
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|x| x / sv).collect();
        let rg = self.rg(a) || self.rg(s);
        self.push_checked("div_scalar", shape, data, Op::DivScalar(a, s), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
        let rg = self.rg(a);
        self.push_checked("clamp", shape, data, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum", vec![1, 1], vec![s], Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums: `m × n` → `m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        let data = (0..m)
            .map(|i| self.value(a).data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        let rg = self.rg(a);
        self.push_checked("sum_cols", vec![m, 1], data, Op::SumCols(a), rg)
    }

    /// Column means: `m × n` → `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        if m == 0 {
            return Err(Error::invalid("mean_rows of a tensor with no rows"));
        }
        let mut data = vec![0.0; n];
        for row in self.value(a).data().chunks(n.max(1)) {
            for (o, v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= m as f64;
        }
        let rg = self.rg(a);
        self.push_checked("mean_rows", vec![1, n], data, Op::MeanRows(a), rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push_checked(name, shape, data, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Row softmax. Columns with `key_mask[j] == false` receive an additive
    /// `-inf` logit, i.e. probability exactly zero.
    pub fn softmax_rows_masked(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::Shape {
                    op: "softmax_rows_masked",
                    lhs: vec![m, n],
                    rhs: vec![mask.len()],
                });
            }
            if n > 0 && !mask.iter().any(|&k| k) {
                return Err(Error::invalid("softmax with every key masked"));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|mk| mk[j]);
        let x = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    data[i * n + j] = e;
                    z += e;
                }
            }
            for v in &mut data[i * n..(i + 1) * n] {
                *v /= z;
            }
        }
        let rg = self.rg(a);
        self.push_checked("softmax", vec![m, n], data, Op::Softmax(a), rg)
    }

    /// Per-row normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        if n == 0 {
            return Err(Error::invalid("layer_norm over zero-width rows"));
        }
        let x = self.value(a).data();
        let mut data = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mu) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push_checked("layer_norm", vec![m, n], data, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nr == 0.0 {
                return Err(Error::NonFinite("l2_normalize (zero-norm row)".into()));
            }
            for j in 0..n {
                data[i * n + j] = row[j] / nr;
            }
            norms.push(nr);
        }
        let rg = self.rg(a);
        self.push_checked("l2_normalize", vec![m, n], data, Op::L2Normalize { x: a, norms }, rg)
    }

    /// Row lookup (embedding); indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!("gather_rows index {bad} out of {m} rows")));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), n], data),
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Picks individual elements; output is `len × 1`.
    pub fn gather_elems(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        if let Some(&(r, c)) = at.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::invalid(format!(
                "gather_elems ({r}, {c}) outside {m}x{n}"
            )));
        }
        let x = self.value(a).data();
        let data = at.iter().map(|&(r, c)| x[r * n + c]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![at.len(), 1], data),
            Op::GatherElems(a, at.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows of nothing"));
        };
        let n = self.m2(first)?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.m2(p)?;
            if c != n {
                return Err(shape_err("concat_rows", self.value(first), self.value(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.m2(a)?;
        let (m2, nb) = self.m2(b)?;
        if m != m2 {
            return Err(shape_err("concat_cols", self.value(a), self.value(b)));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&xa[i * na..(i + 1) * na]);
            data.extend_from_slice(&xb[i * nb..(i + 1) * nb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, na + nb], data),
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.m2(a)?;
        if start > end || end > m {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{end} outside {m} rows"
            )));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![end - start, n], data),
            Op::SliceRows(a, start),
            rg,
        ))
    }

    /// Copy of `base` with the listed rows replaced by the `1 × n` row `fill`.
    pub fn replace_rows(&mut self, base: Var, fill: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.m2(base)?;
        let (f1, fn_) = self.m2(fill)?;
        if f1 != 1 || fn_ != n {
            return Err(shape_err("replace_rows", self.value(base), self.value(fill)));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::invalid(format!("replace_rows row {bad} out of {m}")));
        }
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let mut data = self.value(base).data().to_vec();
        let fv = self.value(fill).data();
        for &r in &rows {
            data[r * n..(r + 1) * n].copy_from_slice(fv);
        }
        let rg = self.rg(base) || self.rg(fill);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::ReplaceRows { base, fill, rows },
            rg,
        ))
    }

    /// Copy of `base` with row `rows[i]` overwritten by row `i` of `src`.
    /// Target rows must be distinct.
    pub fn scatter_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.m2(base)?;
        let (k, n2) = self.m2(src)?;
        if n2 != n || k != rows.len() {
            return Err(shape_err("scatter_rows", self.value(base), self.value(src)));
        }
        let mut seen = vec![false; m];
        for &r in rows {
            if r >= m || std::mem::replace(&mut seen[r], true) {
                return Err(Error::invalid(format!("scatter_rows target {r} invalid")));
            }
        }
        let mut data = self.value(base).data().to_vec();
        let sv = self.value(src).data();
        for (i, &r) in rows.iter().enumerate() {
            data[r * n..(r + 1) * n].copy_from_slice(&sv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::ScatterRows {
                base,
                src,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax of an `m × 1` column within groups: element `i` is normalised
    /// against every element sharing `groups[i]`.
    pub fn segment_softmax(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let (m, c) = self.m2(x)?;
        if c != 1 || groups.len() != m || groups.iter().any(|&g| g >= n_groups) {
            return Err(Error::invalid("segment_softmax: bad column or group index"));
        }
        let xv = self.value(x).data();
        let mut mx = vec![f64::NEG_INFINITY; n_groups];
        for (v, &g) in xv.iter().zip(groups) {
            mx[g] = mx[g].max(*v);
        }
        let mut data: Vec<f64> = xv.iter().zip(groups).map(|(v, &g)| (v - mx[g]).exp()).collect();
        let mut z = vec![0.0; n_groups];
        for (v, &g) in data.iter().zip(groups) {
            z[g] += v;
        }
        for (v, &g) in data.iter_mut().zip(groups) {
            *v /= z[g];
        }
        let rg = self.rg(x);
        self.push_checked(
            "segment_softmax",
            vec![m, 1],
            data,
            Op::SegmentSoftmax {
                x,
                groups: groups.to_vec(),
            },
            rg,
        )
    }

    /// Sums rows into `n_groups` buckets: output row `g` is the sum of every
    /// row `i` with `groups[i] == g`.
    pub fn segment_sum(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let (m, n) = self.m2(x)?;
        if groups.len() != m || groups.iter().any(|&g| g >= n_groups) {
            return Err(Error::invalid("segment_sum: bad group index"));
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; n_groups * n];
        for (i, &g) in groups.iter().enumerate() {
            for j in 0..n {
                data[g * n + j] += xv[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n_groups, n], data),
            Op::SegmentSum {
                x,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target, averaged over all
    /// elements.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err("mse", p, target));
        }
        if p.is_empty() {
            return Err(Error::invalid("mse over zero elements"));
        }
        let n = p.len() as f64;
        let v = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        self.push_checked(
            "mse",
            vec![1, 1],
            vec![v],
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.m2(logits)?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        if m == 0 {
            return Err(Error::invalid("cross_entropy over zero rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::invalid(format!("cross_entropy target {bad} >= {n} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[targets[i]];
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push_checked(
            "cross_entropy",
            vec![1, 1],
            vec![total / m as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: Tensor::from_parts(vec![m, n], probs),
            },
            rg,
        )
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, d) in t.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.value(v).shape().to_vec(), delta));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.m2(*a)?;
                let n = self.m2(*b)?.1;
                if self.rg(*a) {
                    let d = matmul_nt_raw(gd, self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = matmul_tn_raw(self.value(*a).data(), gd, m, k, n);
                    self.acc(grads, *b, d);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.m2(*a)?;
                let n = self.m2(*b)?.0;
                if self.rg(*a) {
                    let d = matmul_raw(gd, self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = matmul_tn_raw(gd, self.value(*a).data(), m, n, k);
                    self.acc(grads, *b, d);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.m2(*a)?;
                self.acc(grads, *a, transpose_raw(gd, c, r));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.acc(grads, *a, gd.iter().zip(vb).map(|(d, y)| d * y).collect());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, gd.iter().zip(va).map(|(d, x)| d * x).collect());
                }
            }
            Op::AddRow(a, row) => {
                let n = self.m2(*a)?.1;
                self.acc(grads, *a, gd.to_vec());
                if self.rg(*row) {
                    let mut d = vec![0.0; n];
                    for chunk in gd.chunks(n.max(1)) {
                        for (o, v) in d.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *row, d);
                }
            }
            Op::MulRow(a, row) => {
                let n = self.m2(*a)?.1;
                let rv = self.value(*row).data();
                let av = self.value(*a).data();
                if self.rg(*a) {
                    let d = gd
                        .chunks(n.max(1))
                        .flat_map(|c| c.iter().zip(rv).map(|(x, y)| x * y))
                        .collect();
                    self.acc(grads, *a, d);
                }
                if self.rg(*row) {
                    let mut d = vec![0.0; n];
                    for (gc, ac) in gd.chunks(n.max(1)).zip(av.chunks(n.max(1))) {
                        for j in 0..gc.len() {
                            d[j] += gc[j] * ac[j];
                        }
                    }
                    self.acc(grads, *row, d);
                }
            }
            Op::MulCol(a, col) => {
                let (m, n) = self.m2(*a)?;
                let cv = self.value(*col).data();
                let av = self.value(*a).data();
                if self.rg(*a) {
                    let mut d = gd.to_vec();
                    for i in 0..m {
                        for v in &mut d[i * n..(i + 1) * n] {
                            *v *= cv[i];
                        }
                    }
                    self.acc(grads, *a, d);
                }
                if self.rg(*col) {
                    let d = (0..m)
                        .map(|i| (0..n).map(|j| gd[i * n + j] * av[i * n + j]).sum())
                        .collect();
                    self.acc(grads, *col, d);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, gd.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => self.acc(grads, *a, gd.to_vec()),
            Op::DivScalar(a, s) => {
                let sv = self.value(*s).item();
                if self.rg(*a) {
                    self.acc(grads, *a, gd.iter().map(|v| v / sv).collect());
                }
                if self.rg(*s) {
                    let dot: f64 = gd.iter().zip(self.value(*a).data()).map(|(d, x)| d * x).sum();
                    self.acc(grads, *s, vec![-dot / (sv * sv)]);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(d, x)| if x >= lo && x <= hi { *d } else { 0.0 })
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![gd[0]; n]);
            }
            Op::SumCols(a) => {
                let n = self.m2(*a)?.1;
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                self.acc(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let (m, _) = self.m2(*a)?;
                let d: Vec<f64> = (0..m).flat_map(|_| gd.iter().map(|v| v / m as f64)).collect();
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, gd.iter().zip(y).map(|(d, y)| d * y).collect()),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, gd.iter().zip(x).map(|(d, x)| d / x).collect());
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, gd.iter().zip(y).map(|(d, y)| d * y * (1.0 - y)).collect())
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, gd.iter().zip(x).map(|(d, x)| d * sigmoid(-x)).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, gd.iter().zip(x).map(|(d, x)| d * gelu_grad(*x)).collect());
            }
            Op::Softmax(a) => {
                let (m, n) = self.m2(*a)?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &gd[i * n..(i + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let (m, n) = self.m2(*x)?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &gd[i * n..(i + 1) * n]);
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[i * n + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::L2Normalize { x, norms } => {
                let (m, n) = self.m2(*x)?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &gd[i * n..(i + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::GatherRows(a, idx) => {
                let n = self.m2(*a)?.1;
                let mut d = vec![0.0; self.value(*a).len()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[r * n + j] += gd[k * n + j];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::GatherElems(a, at) => {
                let n = self.m2(*a)?.1;
                let mut d = vec![0.0; self.value(*a).len()];
                for (k, &(r, c)) in at.iter().enumerate() {
                    d[r * n + c] += gd[k];
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, gd[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.m2(*a)?;
                let nb = self.m2(*b)?.1;
                let w = na + nb;
                let da = (0..m).flat_map(|i| gd[i * w..i * w + na].to_vec()).collect();
                let db = (0..m).flat_map(|i| gd[i * w + na..(i + 1) * w].to_vec()).collect();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::SliceRows(a, start) => {
                let n = self.m2(*a)?.1;
                let mut d = vec![0.0; self.value(*a).len()];
                d[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.acc(grads, *a, d);
            }
            Op::ReplaceRows { base, fill, rows } => {
                let n = self.m2(*base)?.1;
                let mut db = gd.to_vec();
                let mut df = vec![0.0; n];
                for &r in rows {
                    for j in 0..n {
                        df[j] += db[r * n + j];
                        db[r * n + j] = 0.0;
                    }
                }
                self.acc(grads, *base, db);
                self.acc(grads, *fill, df);
            }
            Op::ScatterRows { base, src, rows } => {
                let n = self.m2(*base)?.1;
                let mut db = gd.to_vec();
                let mut ds = vec![0.0; rows.len() * n];
                for (i, &r) in rows.iter().enumerate() {
                    ds[i * n..(i + 1) * n].copy_from_slice(&gd[r * n..(r + 1) * n]);
                    db[r * n..(r + 1) * n].fill(0.0);
                }
                self.acc(grads, *base, db);
                self.acc(grads, *src, ds);
            }
            Op::SegmentSoftmax { x, groups } => {
                let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
                let mut dot = vec![0.0; n_groups];
                for ((yv, gv), &g) in y.iter().zip(gd).zip(groups) {
                    dot[g] += yv * gv;
                }
                let d = y
                    .iter()
                    .zip(gd)
                    .zip(groups)
                    .map(|((yv, gv), &g)| yv * (gv - dot[g]))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::SegmentSum { x, groups } => {
                let n = self.m2(*x)?.1;
                let d = groups
                    .iter()
                    .flat_map(|&g| gd[g * n..(g + 1) * n].to_vec())
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let scale = 2.0 * gd[0] / p.len() as f64;
                let d = p.iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect();
                self.acc(grads, *pred, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = self.m2(*logits)?;
                let scale = gd[0] / m as f64;
                let mut d: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * n + t] -= scale;
                }
                self.acc(grads, *logits, d);
            }
        }
        Ok(())
    }
}
