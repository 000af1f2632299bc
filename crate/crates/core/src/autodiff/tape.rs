use std::sync::Arc;

use super::kernels::{gemm, Trans};
use super::{AutodiffError, Tensor};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
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
    MatMul { a: Var, b: Var, tb: bool },
    Transpose(Var),
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { a: Var, gain: Var, bias: Var, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row { a: Var, i: usize },
    PickPerRow { a: Var, idx: Vec<usize> },
    RowNorm(Var),
    RowDot { a: Var, b: Var },
    RowScale { a: Var, s: Var },
    Col { a: Var, j: usize },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape is single-use: build it, call `backward` once, read gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

/// `b` broadcasts into `a` when it equals `a` or matches a trailing suffix of `a`'s shape.
fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), AutodiffError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar(v.0))
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated for `v` by the last backward pass, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that shares storage with an existing tensor (model parameters).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tbv) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tbv.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tbv));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if tb { (tbv.shape()[1], tbv.shape()[0]) } else { (tbv.shape()[0], tbv.shape()[1]) };
        if k != kb {
            return Err(shape_err("matmul", ta, tbv));
        }
        let mut out = vec![0.0; m * n];
        let bt = if tb { Trans::Yes } else { Trans::No };
        gemm(m, k, n, ta.data(), Trans::No, tbv.data(), bt, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, tb }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(AutodiffError::Invalid(format!("transpose of shape {:?}", t.shape())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if !trailing_broadcast(ta.shape(), tb.shape()) {
            return Err(shape_err(name, ta, tb));
        }
        let nb = tb.numel();
        let bd = tb.data();
        let out = ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), out))
    }

    /// Elementwise `a + b`; `b` may broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, s }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// ReLU with derivative 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.unary(a, softplus);
        let rg = self.rg(a);
        self.push(t, Op::Softplus(a), rg)
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(gain)?;
        self.check(bias)?;
        let (ta, tg, tb) = (self.value(a), self.value(gain), self.value(bias));
        let h = ta.cols();
        if h < 2 || tg.shape() != [h] || tb.shape() != [h] {
            return Err(shape_err("layer_norm", ta, tg));
        }
        let (g, b) = (tg.data(), tb.data());
        let mut out = Vec::with_capacity(ta.numel());
        let mut inv_std = Vec::with_capacity(ta.rows());
        for row in ta.data().chunks(h) {
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / h as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().enumerate().map(|(j, x)| (x - mean) * inv * g[j] + b[j]));
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { a, gain, bias, inv_std }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Looks up rows of a `[V,H]` table; the result is `[ids.len(), H]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        self.check(table)?;
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(AutodiffError::Invalid(format!("gather_rows on shape {:?}", t.shape())));
        }
        let (v, h) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::Invalid(format!("row {bad} out of range for {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::from_parts(vec![ids.len(), h], out), Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let t = self.value(a);
        if t.shape().len() != 2 || start >= end || end > t.cols() {
            return Err(AutodiffError::Invalid(format!("slice_cols {start}..{end} of shape {:?}", t.shape())));
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let t = Tensor::from_parts(vec![t.rows(), end - start], out);
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols { a, start }, rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or_else(|| AutodiffError::Invalid("concat of nothing".into()))?;
        for &p in parts {
            self.check(p)?;
            let (t0, tp) = (self.value(first), self.value(p));
            if tp.shape().len() != 2 || tp.rows() != t0.rows() {
                return Err(shape_err("concat_cols", t0, tp));
            }
        }
        let rows = self.value(first).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks row blocks with a common width `H` into one matrix.
    ///
    /// Each part is either a vector `[H]` (one row) or a matrix `[r, H]`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, AutodiffError> {
        let first = *rows.first().ok_or_else(|| AutodiffError::Invalid("stack of nothing".into()))?;
        self.check(first)?;
        let h = self.value(first).cols();
        let mut out = Vec::new();
        for &r in rows {
            self.check(r)?;
            let t = self.value(r);
            if t.cols() != h || t.shape().len() > 2 || t.shape().is_empty() {
                return Err(shape_err("stack_rows", self.value(first), t));
            }
            out.extend_from_slice(t.data());
        }
        let n = out.len() / h;
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(Tensor::from_parts(vec![n, h], out), Op::StackRows(rows.to_vec()), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let t = self.value(a);
        if t.shape().len() != 2 || i >= t.rows() {
            return Err(AutodiffError::Invalid(format!("row {i} of shape {:?}", t.shape())));
        }
        let v = Tensor::from_parts(vec![t.cols()], t.row(i).to_vec());
        let rg = self.rg(a);
        Ok(self.push(v, Op::Row { a, i }, rg))
    }

    /// Column `j` of a matrix as a vector.
    pub fn col(&mut self, a: Var, j: usize) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let t = self.value(a);
        if t.shape().len() != 2 || j >= t.cols() {
            return Err(AutodiffError::Invalid(format!("col {j} of shape {:?}", t.shape())));
        }
        let v: Vec<f64> = (0..t.rows()).map(|r| t.row(r)[j]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![v.len()], v), Op::Col { a, j }, rg))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let t = self.value(a);
        if t.shape().len() != 2 || idx.len() != t.rows() || idx.iter().any(|&j| j >= t.cols()) {
            return Err(AutodiffError::Invalid(format!("pick_per_row with {} indices on shape {:?}", idx.len(), t.shape())));
        }
        let v: Vec<f64> = idx.iter().enumerate().map(|(r, &j)| t.row(r)[j]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![v.len()], v), Op::PickPerRow { a, idx: idx.to_vec() }, rg))
    }

    /// Euclidean norm of each row; the derivative at a zero row is taken as 0.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v: Vec<f64> = t.data().chunks(t.cols()).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![v.len()], v), Op::RowNorm(a), rg)
    }

    /// Per-row dot product of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("row_dot", ta, tb));
        }
        let c = ta.cols();
        let v: Vec<f64> =
            ta.data().chunks(c).zip(tb.data().chunks(c)).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![v.len()], v), Op::RowDot { a, b }, rg))
    }

    /// Multiplies row `i` of `a[n,H]` by `s[i]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(s)?;
        let (ta, ts) = (self.value(a), self.value(s));
        if ta.shape().len() != 2 || ts.numel() != ta.rows() {
            return Err(shape_err("row_scale", ta, ts));
        }
        let c = ta.cols();
        let sd = ts.data();
        let out = ta.data().iter().enumerate().map(|(i, x)| x * sd[i / c]).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::RowScale { a, s }, rg))
    }

    /// Reverse pass from a scalar `loss`, accumulating into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        self.check(loss)?;
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.acc(v) {
            f(g);
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let value = Arc::clone(&self.nodes[i].value);
        // The op is moved out while its inputs' gradient buffers are borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (Arc::clone(&self.nodes[a.0].value), Arc::clone(&self.nodes[b.0].value));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = value.shape()[1];
                // dA = dC · Bᵀ  (B stored [k,n], or [n,k] when tb)
                self.acc_with(*a, |ga| {
                    let t = if *tb { Trans::No } else { Trans::Yes };
                    gemm(m, n, k, g, Trans::No, bv.data(), t, ga, true);
                });
                self.acc_with(*b, |gb| {
                    if *tb {
                        // B[n,k]: dB = dCᵀ · A
                        gemm(n, m, k, g, Trans::Yes, av.data(), Trans::No, gb, true);
                    } else {
                        // B[k,n]: dB = Aᵀ · dC
                        gemm(k, m, n, av.data(), Trans::Yes, g, Trans::No, gb, true);
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (value.shape()[0], value.shape()[1]);
                self.acc_with(*a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[c * m + r] += g[r * n + c];
                        }
                    }
                });
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                self.acc_with(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc_with(*b, |gb| {
                    let nb = gb.len();
                    g.iter().enumerate().for_each(|(j, y)| gb[j % nb] += sign * y);
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (Arc::clone(&self.nodes[a.0].value), Arc::clone(&self.nodes[b.0].value));
                let nb = bv.numel();
                self.acc_with(*a, |ga| {
                    let bd = bv.data();
                    ga.iter_mut().enumerate().for_each(|(j, x)| *x += g[j] * bd[j % nb]);
                });
                self.acc_with(*b, |gb| {
                    av.data().iter().enumerate().for_each(|(j, x)| gb[j % nb] += g[j] * x);
                });
            }
            Op::Scale { a, s } => {
                self.acc_with(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::AddScalar(a) => {
                self.acc_with(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Gelu(a) => {
                let av = Arc::clone(&self.nodes[a.0].value);
                self.acc_with(*a, |ga| {
                    for (j, &x) in av.data().iter().enumerate() {
                        let u = GELU_K * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        ga[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Relu(a) => {
                let av = Arc::clone(&self.nodes[a.0].value);
                self.acc_with(*a, |ga| {
                    for (j, &x) in av.data().iter().enumerate() {
                        if x > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                self.acc_with(*a, |ga| {
                    for (j, &y) in value.data().iter().enumerate() {
                        ga[j] += g[j] * (1.0 - y * y);
                    }
                });
            }
            Op::Softplus(a) => {
                let av = Arc::clone(&self.nodes[a.0].value);
                self.acc_with(*a, |ga| {
                    for (j, &x) in av.data().iter().enumerate() {
                        ga[j] += g[j] * sigmoid(x);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = value.cols();
                self.acc_with(*a, |ga| {
                    for ((y, dy), dx) in value.data().chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            dx[j] += y[j] * (dy[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = value.cols();
                self.acc_with(*a, |ga| {
                    for ((y, dy), dx) in value.data().chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: f64 = dy.iter().sum();
                        for j in 0..c {
                            dx[j] += dy[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { a, gain, bias, inv_std } => {
                let av = Arc::clone(&self.nodes[a.0].value);
                let gv = Arc::clone(&self.nodes[gain.0].value);
                let h = av.cols();
                let rows = av.rows();
                let gd = gv.data();
                // Recompute x̂ from the saved inverse standard deviations.
                let mut xhat = vec![0.0; av.numel()];
                for r in 0..rows {
                    let row = av.row(r);
                    let mean = row.iter().sum::<f64>() / h as f64;
                    for j in 0..h {
                        xhat[r * h + j] = (row[j] - mean) * inv_std[r];
                    }
                }
                self.acc_with(*a, |ga| {
                    for r in 0..rows {
                        let dy = &g[r * h..(r + 1) * h];
                        let xh = &xhat[r * h..(r + 1) * h];
                        let dxh: Vec<f64> = dy.iter().zip(gd).map(|(d, w)| d * w).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(d, x)| d * x).sum();
                        let hf = h as f64;
                        for j in 0..h {
                            ga[r * h + j] += inv_std[r] / hf * (hf * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                });
                self.acc_with(*gain, |gg| {
                    for (j, (d, x)) in g.iter().zip(&xhat).enumerate() {
                        gg[j % h] += d * x;
                    }
                });
                self.acc_with(*bias, |gb| {
                    for (j, d) in g.iter().enumerate() {
                        gb[j % h] += d;
                    }
                });
            }
            Op::Sum(a) => {
                self.acc_with(*a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                self.acc_with(*a, |ga| {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                });
            }
            Op::GatherRows { table, ids } => {
                let h = value.cols();
                self.acc_with(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * h..(id + 1) * h];
                        dst.iter_mut().zip(&g[r * h..(r + 1) * h]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let w = value.cols();
                let c = self.nodes[a.0].value.cols();
                self.acc_with(*a, |ga| {
                    for r in 0..value.rows() {
                        for j in 0..w {
                            ga[r * c + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = value.cols();
                let rows = value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.acc_with(p, |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let mut offset = 0;
                for &v in rows {
                    let n = self.nodes[v.0].value.numel();
                    self.acc_with(v, |gv| {
                        gv.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, y)| *x += y);
                    });
                    offset += n;
                }
            }
            Op::Row { a, i } => {
                let h = value.numel();
                self.acc_with(*a, |ga| {
                    ga[i * h..(i + 1) * h].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Col { a, j } => {
                let c = self.nodes[a.0].value.cols();
                self.acc_with(*a, |ga| {
                    for (r, y) in g.iter().enumerate() {
                        ga[r * c + j] += y;
                    }
                });
            }
            Op::PickPerRow { a, idx } => {
                let c = self.nodes[a.0].value.cols();
                self.acc_with(*a, |ga| {
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * c + j] += g[r];
                    }
                });
            }
            Op::RowNorm(a) => {
                let av = Arc::clone(&self.nodes[a.0].value);
                let c = av.cols();
                self.acc_with(*a, |ga| {
                    for (r, &norm) in value.data().iter().enumerate() {
                        if norm > 0.0 {
                            for j in 0..c {
                                ga[r * c + j] += g[r] * av.data()[r * c + j] / norm;
                            }
                        }
                    }
                });
            }
            Op::RowDot { a, b } => {
                let (av, bv) = (Arc::clone(&self.nodes[a.0].value), Arc::clone(&self.nodes[b.0].value));
                let c = av.cols();
                self.acc_with(*a, |ga| {
                    for (j, (x, y)) in ga.iter_mut().zip(bv.data()).enumerate() {
                        *x += g[j / c] * y;
                    }
                });
                self.acc_with(*b, |gb| {
                    for (j, (x, y)) in gb.iter_mut().zip(av.data()).enumerate() {
                        *x += g[j / c] * y;
                    }
                });
            }
            Op::RowScale { a, s } => {
                let (av, sv) = (Arc::clone(&self.nodes[a.0].value), Arc::clone(&self.nodes[s.0].value));
                let c = av.cols();
                self.acc_with(*a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] * sv.data()[j / c];
                    }
                });
                self.acc_with(*s, |gs| {
                    for (j, x) in av.data().iter().enumerate() {
                        gs[j / c] += g[j] * x;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
