use std::sync::Arc;

use super::tensor::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::bench::ledger;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Arc<Tensor<T>>),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    CausalMask(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    IndexAddRows { acc: Var, src: Var, idx: Vec<usize> },
    TopKGates { probs: Var, selected: Vec<usize>, k: usize },
    GatherCol { x: Var, rows: Vec<usize>, col: usize },
    MeanRows(Var),
    DotConst(Var, Vec<T>),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations supporting reverse-mode differentiation.
///
/// Node inputs always precede the node, so a single reverse sweep over the
/// tape visits every node after all of its consumers.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant leaf backed by existing storage (no copy).
    pub fn constant_shared(&mut self, t: &Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value: Arc::clone(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).as_matrix(op)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        ledger::record(m * k * n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout used for `x·Wᵀ` with `W` stored `[out×in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        ledger::record(m * k * n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x[..×n] + b[n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(b).numel() != n {
            return Err(self.shape_err("add_row", x, b));
        }
        let bv = self.value(b).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (o, &bi) in row.iter_mut().zip(bv) {
                *o += bi;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[m×n] ⊙ c[m×1]`, scaling row `i` by `c[i]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if self.value(c).numel() != m {
            return Err(self.shape_err("mul_col", x, c));
        }
        let cv = self.value(c).data();
        let mut data = xv.data().to_vec();
        for (row, &ci) in data.chunks_exact_mut(n).zip(cv) {
            for o in row {
                *o *= ci;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(out, Op::MulCol(x, c), rg))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, Arc::new(c)), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Sets entries above the diagonal to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "causal_mask")?;
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for v in &mut data[i * n + (i + 1).min(n)..(i + 1) * n] {
                *v = T::neg_infinity();
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::CausalMask(x), rg))
    }

    /// Per-row normalization to zero mean and unit variance followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        if self.value(gain).numel() != d {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).numel() != d {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = T::from_f64(LAYER_NORM_EPS);
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![len, n], data), Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            if self.matrix(p, "concat_rows")?.1 != n {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let m = data.len() / n;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut n = 0;
        for &p in parts {
            if self.matrix(p, "concat_cols")?.0 != m {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            n += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `x[idx[i]]` stacked in the order given.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(x, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: vec![m, n],
                rhs: vec![idx.len()],
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), n], data),
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// `acc` with `src[i]` added into row `idx[i]`.
    pub fn index_add_rows(&mut self, acc: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(acc, "index_add_rows")?;
        let (s, n2) = self.matrix(src, "index_add_rows")?;
        if n != n2 || s != idx.len() || idx.iter().any(|&i| i >= m) {
            return Err(self.shape_err("index_add_rows", acc, src));
        }
        let mut data = self.value(acc).data().to_vec();
        let sv = self.value(src);
        for (i, &row) in idx.iter().enumerate() {
            for (o, &v) in data[row * n..(row + 1) * n].iter_mut().zip(sv.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(acc) || self.rg(src);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::IndexAddRows { acc, src, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Keeps the `k` largest entries of each probability row and renormalizes
    /// them to sum to one. Ties go to the lowest column index. The selection
    /// itself is not differentiated; gradients flow through the kept values.
    ///
    /// Returns the sparse gate tensor and the selected column indices
    /// (row-major `[rows×k]`, in selection order).
    pub fn top_k_gates(&mut self, probs: Var, k: usize) -> Result<(Var, Vec<usize>)> {
        let (m, n) = self.matrix(probs, "top_k_gates")?;
        if k == 0 || k > n {
            return Err(Error::Contract(format!("top_k = {k} must lie in 1..={n}")));
        }
        let pv = self.value(probs);
        let mut selected = Vec::with_capacity(m * k);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = pv.row(r);
            let sel = top_k_indices(row, k);
            let total: T = sel.iter().map(|&j| row[j]).sum();
            for &j in &sel {
                out[r * n + j] = row[j] / total;
            }
            selected.extend(sel);
        }
        let rg = self.rg(probs);
        let var = self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::TopKGates { probs, selected: selected.clone(), k },
            rg,
        );
        Ok((var, selected))
    }

    /// Column vector `[x[rows[i], col]]`.
    pub fn gather_col(&mut self, x: Var, rows: &[usize], col: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "gather_col")?;
        if rows.is_empty() || col >= n || rows.iter().any(|&r| r >= m) {
            return Err(Error::Shape {
                op: "gather_col",
                lhs: vec![m, n],
                rhs: vec![rows.len(), col],
            });
        }
        let xv = self.value(x);
        let data = rows.iter().map(|&r| xv.get(r, col)).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), 1], data),
            Op::GatherCol { x, rows: rows.to_vec(), col },
            rg,
        ))
    }

    /// Column means `[1×n]` of `x[m×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "mean_rows")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let mn = T::from_f64(m as f64);
        out.iter_mut().for_each(|o| *o /= mn);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), rg))
    }

    /// Scalar `Σ x_i c_i` against constant weights.
    pub fn dot_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if self.value(x).numel() != c.len() {
            return Err(Error::Shape {
                op: "dot_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let c: Vec<T> = c.iter().map(|&v| T::from_f64(v)).collect();
        let s = dot(self.value(x).data(), &c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::DotConst(x, c), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != m || targets.iter().any(|&t| t >= v) {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![m, v],
                rhs: vec![targets.len()],
            });
        }
        let lv = self.value(logits);
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_exact_mut(v).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[targets[r]];
            softmax_in_place(row);
        }
        loss /= T::from_f64(m as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.rg(v) {
            return None;
        }
        let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()));
        Some(g.data_mut())
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dyd = dy.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nt(dyd, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(self.value(*a).data(), dyd, db, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nn(dyd, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(dyd, self.value(*a).data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        axpy(T::one(), dyd, d);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(T::one(), dyd, dx);
                }
                let n = out.cols();
                if let Some(db) = self.slot(grads, *b) {
                    for row in dyd.chunks_exact(n) {
                        axpy(T::one(), row, db);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &g), &o) in da.iter_mut().zip(dyd).zip(bv) {
                        *d += g * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &g), &o) in db.iter_mut().zip(dyd).zip(av) {
                        *d += g * o;
                    }
                }
            }
            Op::MulCol(x, c) => {
                let n = out.cols();
                let (xv, cv) = (self.value(*x).data(), self.value(*c).data());
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, grow), &ci) in dx.chunks_exact_mut(n).zip(dyd.chunks_exact(n)).zip(cv) {
                        axpy(ci, grow, drow);
                    }
                }
                if let Some(dc) = self.slot(grads, *c) {
                    for ((d, grow), xrow) in dc.iter_mut().zip(dyd.chunks_exact(n)).zip(xv.chunks_exact(n)) {
                        *d += dot(grow, xrow);
                    }
                }
            }
            Op::MulConst(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &g), &ci) in dx.iter_mut().zip(dyd).zip(c.data()) {
                        *d += g * ci;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(*s, dyd, dx);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(dyd).zip(xv) {
                        let s = sigmoid(v);
                        *d += g * s * (T::one() + v * (T::one() - s));
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(n)
                        .zip(dyd.chunks_exact(n))
                        .zip(out.data().chunks_exact(n))
                    {
                        let inner = dot(grow, yrow);
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - inner);
                        }
                    }
                }
            }
            Op::CausalMask(x) => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, (drow, grow)) in dx.chunks_exact_mut(n).zip(dyd.chunks_exact(n)).enumerate() {
                        let keep = (i + 1).min(n);
                        axpy(T::one(), &grow[..keep], &mut drow[..keep]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = out.cols();
                let g = self.value(*gain).data();
                if let Some(dx) = self.slot(grads, *x) {
                    let dn = T::from_f64(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (drow, grow)) in dx.chunks_exact_mut(d).zip(dyd.chunks_exact(d)).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = grow[j] * g[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx = dot(&dxhat, xh) / dn;
                        for j in 0..d {
                            drow[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (grow, xh) in dyd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * xh[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for grow in dyd.chunks_exact(d) {
                        axpy(T::one(), grow, db);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(T::one(), dyd, &mut dx[start * n..start * n + dyd.len()]);
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                let n = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (drow, grow) in dx.chunks_exact_mut(n).zip(dyd.chunks_exact(len)) {
                        axpy(T::one(), grow, &mut drow[*start..start + len]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(dp) = self.slot(grads, p) {
                        axpy(T::one(), &dyd[off..off + len], dp);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for (drow, grow) in dp.chunks_exact_mut(w).zip(dyd.chunks_exact(n)) {
                            axpy(T::one(), &grow[off..off + w], drow);
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &row) in idx.iter().enumerate() {
                        axpy(T::one(), &dyd[i * n..(i + 1) * n], &mut dx[row * n..(row + 1) * n]);
                    }
                }
            }
            Op::IndexAddRows { acc, src, idx } => {
                let n = out.cols();
                if let Some(da) = self.slot(grads, *acc) {
                    axpy(T::one(), dyd, da);
                }
                if let Some(ds) = self.slot(grads, *src) {
                    for (i, &row) in idx.iter().enumerate() {
                        axpy(T::one(), &dyd[row * n..(row + 1) * n], &mut ds[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::TopKGates { probs, selected, k } => {
                let n = out.cols();
                let pv = self.value(*probs);
                if let Some(dp) = self.slot(grads, *probs) {
                    for (r, sel) in selected.chunks_exact(*k).enumerate() {
                        let prow = pv.row(r);
                        let total: T = sel.iter().map(|&j| prow[j]).sum();
                        let inner: T = sel
                            .iter()
                            .map(|&j| dyd[r * n + j] * out.data()[r * n + j])
                            .sum();
                        for &j in sel {
                            dp[r * n + j] += (dyd[r * n + j] - inner) / total;
                        }
                    }
                }
            }
            Op::GatherCol { x, rows, col } => {
                let n = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (&r, &g) in rows.iter().zip(dyd) {
                        dx[r * n + col] += g;
                    }
                }
            }
            Op::MeanRows(x) => {
                let n = out.cols();
                let m = self.value(*x).rows();
                let inv = T::one() / T::from_f64(m as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for drow in dx.chunks_exact_mut(n) {
                        axpy(inv, dyd, drow);
                    }
                }
            }
            Op::DotConst(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dyd[0], c, dx);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let g = dyd[0];
                    dx.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let scale = dyd[0] / T::from_f64(targets.len() as f64);
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, (drow, prow)) in dl.chunks_exact_mut(v).zip(probs.chunks_exact(v)).enumerate() {
                        axpy(scale, prow, drow);
                        drow[targets[r]] -= scale;
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, zero-filled when unreachable from the loss.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Indices of the `k` largest entries, largest first; ties resolve to the lower index.
pub fn top_k_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (j, &v) in row.iter().enumerate() {
            if chosen.contains(&j) {
                continue;
            }
            match best {
                Some(b) if !(v > row[b]) => {}
                _ => best = Some(j),
            }
        }
        chosen.push(best.expect("k <= row length"));
    }
    chosen
}
