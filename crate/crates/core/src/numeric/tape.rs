//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Forward calls build the graph eagerly (each op computes its value as it
//! is recorded); [`Tape::backward`] walks the tape in reverse and accumulates
//! gradients into every node. Leaves hold parameters and constants; the
//! caller keeps the [`NodeId`]s of the parameters it wants gradients for.

use crate::error::{Error, Result};
use crate::numeric::tensor::{matmul_acc, matmul_transa_acc, matmul_transb_acc, Scalar, Tensor};
use crate::numeric::{gelu_derivative, gelu_scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    /// Parameter or constant. No backward rule.
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add(NodeId, NodeId),
    /// `(m,n) + (n,)` with the row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    /// Elementwise product of two same-shape tensors.
    Mul(NodeId, NodeId),
    /// Multiply by a compile-time constant.
    Scale(NodeId, T),
    /// Tanh-approximation GELU, elementwise.
    Gelu(NodeId),
    /// Per-row layer norm of `(m,n)` with `(n,)` gain and shift.
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    /// Row-wise softmax of a `(m,n)` tensor.
    SoftmaxRows(NodeId),
    /// `(m,k) @ (k,n)`.
    MatMul(NodeId, NodeId),
    /// `(m,k) @ (n,k)^T`.
    MatMulTransB(NodeId, NodeId),
    /// Select rows of a `(r,c)` tensor; backward scatter-adds.
    GatherRows { src: NodeId, indices: Vec<usize> },
    /// Contiguous column slice of a `(m,n)` tensor.
    SliceCols { src: NodeId, start: usize, len: usize },
    /// Horizontal concatenation of same-height matrices.
    ConcatCols(Vec<NodeId>),
    /// Vertical concatenation of same-width matrices.
    ConcatRows(Vec<NodeId>),
    /// Sum of all elements, producing a scalar.
    SumAll(NodeId),
    /// Softmax cross-entropy against integer targets, summed over rows.
    SoftmaxXentSum { logits: NodeId, targets: Vec<usize> },
    /// Sigmoid binary cross-entropy against 0/1 targets, averaged over all
    /// elements, computed in the stable logit form.
    BceWithLogitsMean { logits: NodeId, targets: Vec<T> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros of the given shape if the node did not
    /// influence the loss.
    pub fn take(&mut self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record a parameter or constant.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid_argument(format!(
                "add shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let rv = self.value(row);
        if rv.shape() != [n] {
            return Err(Error::invalid_argument(format!(
                "add_row expects row of shape [{n}], got {:?}",
                rv.shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let row_data = rv.data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += row_data[j];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::AddRow(a, row), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid_argument(format!(
                "mul shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, factor), value)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu(a), value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        if eps <= T::zero() {
            return Err(Error::invalid_argument("layer_norm eps must be > 0".to_string()));
        }
        let (m, n) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::invalid_argument(format!(
                "layer_norm gain/shift must have shape [{n}], got {:?} and {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![T::zero(); m * n];
        let inv_n = T::one() / T::from_f64(n as f64);
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, value))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if n == 0 {
            return Err(Error::invalid_argument("softmax over empty rows".to_string()));
        }
        let xd = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let out = &mut data[i * n..(i + 1) * n];
            softmax_into(row, out);
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::invalid_argument(format!(
                "matmul inner dims differ: ({m},{k}) @ ({k2},{n})"
            )));
        }
        let mut data = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut data);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::invalid_argument(format!(
                "matmul_transb inner dims differ: ({m},{k}) @ ({n},{k2})^T"
            )));
        }
        let mut data = vec![T::zero(); m * n];
        matmul_transb_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut data);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMulTransB(a, b), value))
    }

    pub fn gather_rows(&mut self, src: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = self.value(src).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid_argument(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let sd = self.value(src).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            data.extend_from_slice(&sd[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        Ok(self.push(Op::GatherRows { src, indices }, value))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(src).dims2()?;
        if start + len > cols {
            return Err(Error::invalid_argument(format!(
                "column slice {start}..{} exceeds width {cols}",
                start + len
            )));
        }
        let sd = self.value(src).data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&sd[i * cols + start..i * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(Op::SliceCols { src, start, len }, value))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid_argument("concat_cols of no parts".to_string()));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in &parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::invalid_argument("concat_cols height mismatch".to_string()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.value(p).data();
                data.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols(parts), value))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid_argument("concat_rows of no parts".to_string()));
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut total_rows = 0;
        for &p in &parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::invalid_argument("concat_rows width mismatch".to_string()));
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &p in &parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![total_rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts), value))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push(Op::SumAll(a), Tensor::scalar(acc))
    }

    /// Cross-entropy of row-wise softmax against `targets`, summed over rows.
    pub fn softmax_xent_sum(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(Error::invalid_argument(format!(
                "{} targets for {m} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::invalid_argument(format!("target {bad} out of {n} classes")));
        }
        let zd = self.value(logits).data();
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &zd[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for &z in row {
                sum += (z - max).exp();
            }
            loss += max + sum.ln() - row[t];
        }
        Ok(self.push(Op::SoftmaxXentSum { logits, targets }, Tensor::scalar(loss)))
    }

    /// Mean over all elements of the stable binary cross-entropy
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: Vec<T>) -> Result<NodeId> {
        let zt = self.value(logits);
        if targets.len() != zt.numel() {
            return Err(Error::invalid_argument(format!(
                "{} targets for {} logits",
                targets.len(),
                zt.numel()
            )));
        }
        if zt.numel() == 0 {
            return Err(Error::invalid_argument("bce over empty logits".to_string()));
        }
        let mut loss = T::zero();
        for (&z, &y) in zt.data().iter().zip(&targets) {
            loss += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        loss = loss / T::from_f64(zt.numel() as f64);
        Ok(self.push(Op::BceWithLogitsMean { logits, targets }, Tensor::scalar(loss)))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid_argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..self.nodes.len()).rev() {
            let Some(out_grad) = grads[idx].take() else { continue };
            self.apply_backward(idx, &out_grad, &mut grads)?;
            grads[idx] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        id: NodeId,
        contribution: Tensor<T>,
    ) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => {
                *slot = Some(contribution);
                Ok(())
            }
        }
    }

    fn apply_backward(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                let (m, n) = g.dims2()?;
                let mut row_grad = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        row_grad[j] += g.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *row, Tensor::new(vec![n], row_grad)?)
            }
            Op::Mul(a, b) => {
                let da: Vec<T> =
                    g.data().iter().zip(self.value(*b).data()).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<T> =
                    g.data().iter().zip(self.value(*a).data()).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?)?;
                self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), db)?)
            }
            Op::Scale(a, factor) => {
                let da: Vec<T> = g.data().iter().map(|&gv| gv * *factor).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?)
            }
            Op::Gelu(a) => {
                let da: Vec<T> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &x)| gv * gelu_derivative(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?)
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = self.value(*x).dims2()?;
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let inv_n = T::one() / T::from_f64(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let grow = &gd[i * n..(i + 1) * n];
                    let mut mean = T::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_n;
                    let mut var = T::zero();
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var * inv_n;
                    let inv_std = T::one() / (var + *eps).sqrt();
                    // xh = normalized input; h = gamma-weighted upstream grad
                    let mut mean_h = T::zero();
                    let mut mean_hxh = T::zero();
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv_std;
                        let h = grow[j] * gam[j];
                        mean_h += h;
                        mean_hxh += h * xh;
                        dgamma[j] += grow[j] * xh;
                        dbeta[j] += grow[j];
                    }
                    mean_h = mean_h * inv_n;
                    mean_hxh = mean_hxh * inv_n;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv_std;
                        let h = grow[j] * gam[j];
                        dx[i * n + j] = (h - mean_h - xh * mean_hxh) * inv_std;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], dx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![n], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![n], dbeta)?)
            }
            Op::SoftmaxRows(a) => {
                let p = &self.nodes[idx].value;
                let (m, n) = p.dims2()?;
                let pd = p.data();
                let gd = g.data();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let prow = &pd[i * n..(i + 1) * n];
                    let grow = &gd[i * n..(i + 1) * n];
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot += prow[j] * grow[j];
                    }
                    for j in 0..n {
                        dx[i * n + j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], dx)?)
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let mut da = vec![T::zero(); m * k];
                matmul_transb_acc(g.data(), self.value(*b).data(), m, n, k, &mut da);
                let mut db = vec![T::zero(); k * n];
                matmul_transa_acc(self.value(*a).data(), g.data(), k, m, n, &mut db);
                self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?)?;
                self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?)
            }
            Op::MatMulTransB(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (n, _) = self.value(*b).dims2()?;
                let mut da = vec![T::zero(); m * k];
                matmul_acc(g.data(), self.value(*b).data(), m, n, k, &mut da);
                let mut db = vec![T::zero(); n * k];
                matmul_transa_acc(g.data(), self.value(*a).data(), n, m, k, &mut db);
                self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?)?;
                self.accumulate(grads, *b, Tensor::new(vec![n, k], db)?)
            }
            Op::GatherRows { src, indices } => {
                let (rows, cols) = self.value(*src).dims2()?;
                let mut dsrc = vec![T::zero(); rows * cols];
                for (out_row, &src_row) in indices.iter().enumerate() {
                    let grow = &g.data()[out_row * cols..(out_row + 1) * cols];
                    let drow = &mut dsrc[src_row * cols..(src_row + 1) * cols];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *src, Tensor::new(vec![rows, cols], dsrc)?)
            }
            Op::SliceCols { src, start, len } => {
                let (rows, cols) = self.value(*src).dims2()?;
                let mut dsrc = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    let grow = &g.data()[i * len..(i + 1) * len];
                    let drow = &mut dsrc[i * cols + start..i * cols + start + len];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *src, Tensor::new(vec![rows, cols], dsrc)?)
            }
            Op::ConcatCols(parts) => {
                let (rows, _) = self.nodes[idx].value.dims2()?;
                let total = self.nodes[idx].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    let mut dp = vec![T::zero(); rows * w];
                    for i in 0..rows {
                        let grow = &g.data()[i * total + offset..i * total + offset + w];
                        dp[i * w..(i + 1) * w].copy_from_slice(grow);
                    }
                    self.accumulate(grads, p, Tensor::new(vec![rows, w], dp)?)?;
                    offset += w;
                }
                Ok(())
            }
            Op::ConcatRows(parts) => {
                let (_, cols) = self.nodes[idx].value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (r, _) = self.value(p).dims2()?;
                    let dp = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    self.accumulate(grads, p, Tensor::new(vec![r, cols], dp)?)?;
                    offset += r;
                }
                Ok(())
            }
            Op::SumAll(a) => {
                let gv = g.scalar_value()?;
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(shape, gv))
            }
            Op::SoftmaxXentSum { logits, targets } => {
                let gv = g.scalar_value()?;
                let (m, n) = self.value(*logits).dims2()?;
                let zd = self.value(*logits).data();
                let mut dz = vec![T::zero(); m * n];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &zd[i * n..(i + 1) * n];
                    let out = &mut dz[i * n..(i + 1) * n];
                    softmax_into(row, out);
                    out[t] = out[t] - T::one();
                    for v in out.iter_mut() {
                        *v = *v * gv;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![m, n], dz)?)
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let gv = g.scalar_value()?;
                let zt = self.value(*logits);
                let scale = gv / T::from_f64(zt.numel() as f64);
                let dz: Vec<T> = zt
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(zt.shape().to_vec(), dz)?)
            }
        }
    }
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &z) in out.iter_mut().zip(row) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(tape: &mut Tape<f64>, v: f64) -> NodeId {
        tape.leaf(Tensor::scalar(v))
    }

    #[test]
    fn gradient_of_square_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = scalar_leaf(&mut tape, 3.0);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn gradient_of_identity_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = scalar_leaf(&mut tape, -17.25);
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    /// Central-difference check of d(sum(softmax(x) * c))/dx on a random 5-vector.
    #[test]
    fn softmax_weighted_sum_matches_finite_differences() {
        let x0 = [0.31, -1.2, 0.77, 2.05, -0.4];
        let c = [1.0, -2.0, 0.5, 0.25, 3.0];

        let eval = |x: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let xn = tape.leaf(Tensor::new(vec![1, 5], x.to_vec()).unwrap());
            let cn = tape.leaf(Tensor::new(vec![1, 5], c.to_vec()).unwrap());
            let p = tape.softmax_rows(xn).unwrap();
            let w = tape.mul(p, cn).unwrap();
            let s = tape.sum_all(w);
            tape.value(s).scalar_value().unwrap()
        };

        let mut tape = Tape::<f64>::new();
        let xn = tape.leaf(Tensor::new(vec![1, 5], x0.to_vec()).unwrap());
        let cn = tape.leaf(Tensor::new(vec![1, 5], c.to_vec()).unwrap());
        let p = tape.softmax_rows(xn).unwrap();
        let w = tape.mul(p, cn).unwrap();
        let s = tape.sum_all(w);
        let grads = tape.backward(s).unwrap();
        let analytic = grads.get(xn).unwrap().data().to_vec();

        let h = 1e-3;
        for i in 0..5 {
            let mut xp = x0;
            xp[i] += h;
            let mut xm = x0;
            xm[i] -= h;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            assert!(rel < 1e-3, "component {i}: analytic {} vs numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn xent_of_uniform_logits_is_ln_vocab() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 7]));
        let loss = tape.softmax_xent_sum(logits, vec![0, 3, 6]).unwrap();
        let per_row = tape.value(loss).scalar_value().unwrap() / 3.0;
        assert!((per_row - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_of_one_hot_logits_approaches_zero() {
        let mut tape = Tape::<f64>::new();
        let mut data = vec![0.0; 5];
        data[2] = 50.0;
        let logits = tape.leaf(Tensor::new(vec![1, 5], data).unwrap());
        let loss = tape.softmax_xent_sum(logits, vec![2]).unwrap();
        assert!(tape.value(loss).scalar_value().unwrap() < 1e-9);
    }

    #[test]
    fn bce_at_zero_logits_is_ln_two() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 4]));
        let loss = tape.bce_with_logits_mean(logits, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let v = tape.value(loss).scalar_value().unwrap();
        assert!((v - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let x0 = [0.4, -0.9, 1.3, 0.1, 0.0, 2.0];
        let gamma0 = [1.1, 0.9, 1.0];
        let beta0 = [0.0, 0.1, -0.2];
        let eps = 1e-5;

        let eval = |x: &[f64], gamma: &[f64], beta: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let xn = tape.leaf(Tensor::new(vec![2, 3], x.to_vec()).unwrap());
            let gn = tape.leaf(Tensor::new(vec![3], gamma.to_vec()).unwrap());
            let bn = tape.leaf(Tensor::new(vec![3], beta.to_vec()).unwrap());
            let y = tape.layer_norm(xn, gn, bn, eps).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let s = tape.sum_all(sq);
            tape.value(s).scalar_value().unwrap()
        };

        let mut tape = Tape::<f64>::new();
        let xn = tape.leaf(Tensor::new(vec![2, 3], x0.to_vec()).unwrap());
        let gn = tape.leaf(Tensor::new(vec![3], gamma0.to_vec()).unwrap());
        let bn = tape.leaf(Tensor::new(vec![3], beta0.to_vec()).unwrap());
        let y = tape.layer_norm(xn, gn, bn, eps).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum_all(sq);
        let grads = tape.backward(s).unwrap();

        let h = 1e-5;
        let dx = grads.get(xn).unwrap().data();
        for i in 0..6 {
            let mut xp = x0;
            xp[i] += h;
            let mut xm = x0;
            xm[i] -= h;
            let numeric = (eval(&xp, &gamma0, &beta0) - eval(&xm, &gamma0, &beta0)) / (2.0 * h);
            assert!(
                (dx[i] - numeric).abs() / numeric.abs().max(1.0) < 1e-5,
                "dx[{i}]: {} vs {numeric}",
                dx[i]
            );
        }
        let dgamma = grads.get(gn).unwrap().data();
        for i in 0..3 {
            let mut gp = gamma0;
            gp[i] += h;
            let mut gm = gamma0;
            gm[i] -= h;
            let numeric = (eval(&x0, &gp, &beta0) - eval(&x0, &gm, &beta0)) / (2.0 * h);
            assert!((dgamma[i] - numeric).abs() / numeric.abs().max(1.0) < 1e-5);
        }
    }
}
