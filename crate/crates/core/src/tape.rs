//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append nodes in topological order during the forward pass;
//! [`Tape::backward`] walks them in reverse insertion order and accumulates
//! gradients into every leaf created with `requires_grad`. The op set covers
//! exactly what the model needs: matmul (plain and B-transposed), bias-add,
//! residual add, scalar scale, masked softmax, layer norm, GELU, column
//! concat/slice, row slice, embedding gather, and a padded cross-entropy
//! reduction.

use std::sync::Arc;

use crate::tensor::{Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Boolean attention mask: `true` = allow, `false` = block. Blocked scores
/// receive the additive `-inf` sentinel before softmax, so blocked weights
/// come out exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self, TensorError> {
        if allow.len() != rows * cols {
            return Err(TensorError::ShapeDataMismatch {
                shape: vec![rows, cols],
                expected: rows * cols,
                actual: allow.len(),
            });
        }
        Ok(Self { rows, cols, allow })
    }

    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, allowed: bool) {
        self.allow[r * self.cols + c] = allowed;
    }

    /// Intersection of two masks of identical shape.
    pub fn and(&self, other: &AttnMask) -> Result<AttnMask, TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::DimensionMismatch {
                op: "mask_and",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        Ok(AttnMask {
            rows: self.rows,
            cols: self.cols,
            allow: self
                .allow
                .iter()
                .zip(&other.allow)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    /// True if every row allows at least one column.
    pub fn no_degenerate_rows(&self) -> bool {
        (0..self.rows).all(|r| (0..self.cols).any(|c| self.is_allowed(r, c)))
    }
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddMask { a: NodeId, mask: Arc<AttnMask> },
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize },
    SliceRows { a: NodeId, start: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    CeLossMean { logits: NodeId, targets: Vec<usize>, active: Vec<bool>, probs: Vec<f64> },
    Sum { a: NodeId },
    Mean { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation tape. One tape per forward pass; single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node, if the node
    /// was on the differentiable path.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// C[m,n] = A[m,k] · B[k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.value(a).rows_cols();
        let (kb, n) = self.value(b).rows_cols();
        if ka != kb || self.value(a).rank() != 2 || self.value(b).rank() != 2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let req = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], out)?, req))
    }

    /// C[m,n] = A[m,k] · B[n,k]ᵀ — avoids materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.value(a).rows_cols();
        let (n, kb) = self.value(b).rows_cols();
        if ka != kb || self.value(a).rank() != 2 || self.value(b).rank() != 2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let req = self.needs(&[a, b]);
        Ok(self.push(Op::MatMulNT { a, b }, Tensor::new(vec![m, n], out)?, req))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::DimensionMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, data)?, req))
    }

    /// Row-broadcast bias add: A[r,c] + bias[c].
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(a).rows_cols();
        if self.value(bias).shape() != [c] {
            return Err(TensorError::DimensionMismatch {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let bd = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bd) {
                *v += b;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.needs(&[a, bias]);
        let _ = r;
        Ok(self.push(Op::AddBias { a, bias }, Tensor::new(shape, data)?, req))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.needs(&[a]);
        self.push(
            Op::Scale { a, factor },
            Tensor::new(shape, data).expect("scale preserves shape"),
            req,
        )
    }

    /// Adds the `-inf` sentinel at blocked positions ("allow" adds 0).
    pub fn add_mask(&mut self, a: NodeId, mask: Arc<AttnMask>) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(a).rows_cols();
        if r != mask.rows() || c != mask.cols() {
            return Err(TensorError::DimensionMismatch {
                op: "add_mask",
                lhs: vec![r, c],
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                if !mask.is_allowed(i, j) {
                    data[i * c + j] = f64::NEG_INFINITY;
                }
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.needs(&[a]);
        Ok(self.push(Op::AddMask { a, mask }, Tensor::new(shape, data)?, req))
    }

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    /// `-inf` inputs produce exactly-zero outputs; a fully masked row is a
    /// degenerate-row error.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(a).rows_cols();
        if c == 0 {
            return Err(TensorError::RankMismatch {
                op: "softmax",
                expected: 1,
                shape: self.value(a).shape().to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        for (ri, row) in data.chunks_mut(c).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { row: ri });
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.needs(&[a]);
        let _ = r;
        Ok(self.push(Op::Softmax { a }, Tensor::new(shape, data)?, req))
    }

    /// Per-row standardization followed by the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).rows_cols();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for ri in 0..r {
            let row = &xd[ri * c..(ri + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[ri] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[ri * c + j] = xh;
                out[ri * c + j] = gd[j] * xh + bd[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let req = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            Tensor::new(shape, out)?,
            req,
        ))
    }

    /// GELU via the tanh approximation; the backward pass uses the exact
    /// derivative of the same approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.needs(&[a]);
        self.push(
            Op::Gelu { a },
            Tensor::new(shape, data).expect("gelu preserves shape"),
            req,
        )
    }

    /// [r, ca] ++ [r, cb] → [r, ca+cb] along the channel axis.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ra, ca) = self.value(a).rows_cols();
        let (rb, cb) = self.value(b).rows_cols();
        if ra != rb {
            return Err(TensorError::DimensionMismatch {
                op: "concat_cols",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let req = self.needs(&[a, b]);
        Ok(self.push(
            Op::ConcatCols { a, b },
            Tensor::new(vec![ra, ca + cb], data)?,
            req,
        ))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(a).rows_cols();
        if start + len > c {
            return Err(TensorError::SliceOutOfBounds {
                op: "slice_cols",
                start,
                len,
                extent: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for ri in 0..r {
            data.extend_from_slice(&self.value(a).row(ri)[start..start + len]);
        }
        let req = self.needs(&[a]);
        Ok(self.push(Op::SliceCols { a, start }, Tensor::new(vec![r, len], data)?, req))
    }

    /// Rows [start, start+len) of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(a).rows_cols();
        if start + len > r {
            return Err(TensorError::SliceOutOfBounds {
                op: "slice_rows",
                start,
                len,
                extent: r,
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let req = self.needs(&[a]);
        Ok(self.push(Op::SliceRows { a, start }, Tensor::new(vec![len, c], data)?, req))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let (rows, c) = self.value(table).rows_cols();
        for &id in ids {
            if id >= rows {
                return Err(TensorError::GatherOutOfBounds { index: id, rows });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            data.extend_from_slice(self.value(table).row(id));
        }
        let req = self.needs(&[table]);
        Ok(self.push(
            Op::Gather { table, ids: ids.to_vec() },
            Tensor::new(vec![ids.len(), c], data)?,
            req,
        ))
    }

    /// Mean over active rows of `-log softmax(logits)[target]`. Rows with
    /// `active[r] == false` (padding) contribute nothing. All-padded input is
    /// defined as zero loss.
    pub fn ce_loss_mean(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        active: &[bool],
    ) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(logits).rows_cols();
        if targets.len() != r || active.len() != r {
            return Err(TensorError::DimensionMismatch {
                op: "ce_loss_mean",
                lhs: vec![r, c],
                rhs: vec![targets.len(), active.len()],
            });
        }
        for (ri, &t) in targets.iter().enumerate() {
            if active[ri] && t >= c {
                return Err(TensorError::GatherOutOfBounds { index: t, rows: c });
            }
        }
        let n_active = active.iter().filter(|a| **a).count();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        if n_active == 0 {
            eprintln!("warning: ce_loss_mean over fully padded batch; loss defined as 0");
        }
        for ri in 0..r {
            if !active[ri] {
                continue;
            }
            let row = self.value(logits).row(ri);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &v in row {
                sum += (v - m).exp();
            }
            let lse = m + sum.ln();
            loss += lse - row[targets[ri]];
            let dst = &mut probs[ri * c..(ri + 1) * c];
            let row = self.value(logits).row(ri);
            for j in 0..c {
                dst[j] = (row[j] - lse).exp();
            }
        }
        if n_active > 0 {
            loss /= n_active as f64;
        }
        let req = self.needs(&[logits]);
        Ok(self.push(
            Op::CeLossMean {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            req,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let req = self.needs(&[a]);
        self.push(Op::Sum { a }, Tensor::scalar(s), req)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel().max(1) as f64;
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n;
        let req = self.needs(&[a]);
        self.push(Op::Mean { a }, Tensor::scalar(s), req)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Populates gradients for every
    /// `requires_grad` node on the path.
    pub fn backward(&mut self, output: NodeId) -> Result<(), TensorError> {
        if self.value(output).numel() != 1 {
            return Err(TensorError::RankMismatch {
                op: "backward",
                expected: 1,
                shape: self.value(output).shape().to_vec(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.apply_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        if self.grads[id.0].is_none() {
            let n = self.nodes[id.0].value.numel();
            self.grads[id.0] = Some(vec![0.0; n]);
        }
        self.grads[id.0].as_mut().unwrap()
    }

    fn apply_backward(&mut self, i: usize, g: &[f64]) {
        // Inputs always precede node i on the tape, so the temporary
        // buffers below never alias g.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).rows_cols();
                let (_, n) = self.value(b).rows_cols();
                if self.requires_grad(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    gemm_nt(g, &bv, self.grad_buf(a), m, n, k);
                }
                if self.requires_grad(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    gemm_tn(&av, g, self.grad_buf(b), m, k, n);
                }
            }
            Op::MatMulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).rows_cols();
                let (n, _) = self.value(b).rows_cols();
                if self.requires_grad(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    gemm_nn(g, &bv, self.grad_buf(a), m, n, k);
                }
                if self.requires_grad(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    gemm_tn(g, &av, self.grad_buf(b), m, n, k);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    accumulate(self.grad_buf(a), g);
                }
                if self.requires_grad(b) {
                    accumulate(self.grad_buf(b), g);
                }
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                let (_, c) = self.value(a).rows_cols();
                if self.requires_grad(a) {
                    accumulate(self.grad_buf(a), g);
                }
                if self.requires_grad(bias) {
                    let gb = self.grad_buf(bias);
                    for row in g.chunks(c) {
                        for (dst, src) in gb.iter_mut().zip(row) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                let (a, factor) = (*a, *factor);
                if self.requires_grad(a) {
                    let gb = self.grad_buf(a);
                    for (dst, src) in gb.iter_mut().zip(g) {
                        *dst += factor * src;
                    }
                }
            }
            Op::AddMask { a, mask } => {
                // Allowed positions add a constant 0 (gradient passes
                // through); blocked positions are overwritten with -inf and
                // do not depend on the input at all.
                let a = *a;
                let mask = mask.clone();
                if self.requires_grad(a) {
                    let cols = mask.cols();
                    let gb = self.grad_buf(a);
                    for (idx, (dst, src)) in gb.iter_mut().zip(g).enumerate() {
                        if mask.is_allowed(idx / cols, idx % cols) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let a = *a;
                if self.requires_grad(a) {
                    let (r, c) = self.nodes[i].value.rows_cols();
                    let p = self.nodes[i].value.data().to_vec();
                    let gb = self.grad_buf(a);
                    for ri in 0..r {
                        let prow = &p[ri * c..(ri + 1) * c];
                        let grow = &g[ri * c..(ri + 1) * c];
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        let dst = &mut gb[ri * c..(ri + 1) * c];
                        for j in 0..c {
                            dst[j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (r, c) = self.value(x).rows_cols();
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let gd = self.nodes[gamma.0].value.data().to_vec();
                if self.requires_grad(gamma) {
                    let gg = self.grad_buf(gamma);
                    for ri in 0..r {
                        for j in 0..c {
                            gg[j] += g[ri * c + j] * xhat[ri * c + j];
                        }
                    }
                }
                if self.requires_grad(beta) {
                    let gb = self.grad_buf(beta);
                    for ri in 0..r {
                        for j in 0..c {
                            gb[j] += g[ri * c + j];
                        }
                    }
                }
                if self.requires_grad(x) {
                    let gx = self.grad_buf(x);
                    for ri in 0..r {
                        let gr = &g[ri * c..(ri + 1) * c];
                        let xh = &xhat[ri * c..(ri + 1) * c];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gd[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[j];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        let dst = &mut gx[ri * c..(ri + 1) * c];
                        for j in 0..c {
                            let dxh = gr[j] * gd[j];
                            dst[j] += inv_std[ri] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let a = *a;
                if self.requires_grad(a) {
                    let xv = self.nodes[a.0].value.data().to_vec();
                    let gb = self.grad_buf(a);
                    for ((dst, src), &x) in gb.iter_mut().zip(g).zip(&xv) {
                        *dst += src * gelu_bwd(x);
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let (r, ca) = self.value(a).rows_cols();
                let (_, cb) = self.value(b).rows_cols();
                let c = ca + cb;
                if self.requires_grad(a) {
                    let ga = self.grad_buf(a);
                    for ri in 0..r {
                        for j in 0..ca {
                            ga[ri * ca + j] += g[ri * c + j];
                        }
                    }
                }
                if self.requires_grad(b) {
                    let gb = self.grad_buf(b);
                    for ri in 0..r {
                        for j in 0..cb {
                            gb[ri * cb + j] += g[ri * c + ca + j];
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                if self.requires_grad(a) {
                    let (r, c) = self.value(a).rows_cols();
                    let len = self.nodes[i].value.rows_cols().1;
                    let ga = self.grad_buf(a);
                    for ri in 0..r {
                        for j in 0..len {
                            ga[ri * c + start + j] += g[ri * len + j];
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                if self.requires_grad(a) {
                    let (_, c) = self.value(a).rows_cols();
                    let ga = self.grad_buf(a);
                    for (j, v) in g.iter().enumerate() {
                        ga[start * c + j] += v;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.requires_grad(table) {
                    let (_, c) = self.value(table).rows_cols();
                    let gt = self.grad_buf(table);
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[row * c + j];
                        }
                    }
                }
            }
            Op::CeLossMean { logits, targets, active, probs } => {
                let logits = *logits;
                if self.requires_grad(logits) {
                    let (r, c) = self.value(logits).rows_cols();
                    let targets = targets.clone();
                    let active = active.clone();
                    let probs = probs.clone();
                    let n_active = active.iter().filter(|a| **a).count().max(1) as f64;
                    let scale = g[0] / n_active;
                    let gl = self.grad_buf(logits);
                    for ri in 0..r {
                        if !active[ri] {
                            continue;
                        }
                        for j in 0..c {
                            let indicator = if j == targets[ri] { 1.0 } else { 0.0 };
                            gl[ri * c + j] += scale * (probs[ri * c + j] - indicator);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let a = *a;
                if self.requires_grad(a) {
                    let gb = self.grad_buf(a);
                    for dst in gb.iter_mut() {
                        *dst += g[0];
                    }
                }
            }
            Op::Mean { a } => {
                let a = *a;
                if self.requires_grad(a) {
                    let n = self.value(a).numel().max(1) as f64;
                    let gb = self.grad_buf(a);
                    for dst in gb.iter_mut() {
                        *dst += g[0] / n;
                    }
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-major transpose into a fresh buffer: `[rows×cols]` → `[cols×rows]`.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// Register-tile sizes for the matmul micro-kernel: an MR×NR block of C is
// held in accumulators while a column strip of A and a row strip of B
// stream past. 8×16 keeps the tile plus two B vectors inside the AVX-512
// register file; on AVX2 the compiler splits the same tile into ymm pairs.
const MR: usize = 8;
const NR: usize = 16;

/// out[m,n] += a[m,k] · b[k,n]
///
/// The only gemm in the crate: transposed variants are expressed by
/// transposing the small operand first, which costs O(rows·cols) copies
/// against O(m·k·n) multiply-adds.
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mb = m - m % MR;
    let nb = n - n % NR;
    let mut i = 0;
    while i < mb {
        let mut j = 0;
        while j < nb {
            let mut acc = [[0.0f64; NR]; MR];
            for t in 0..k {
                let bp = &b[t * n + j..t * n + j + NR];
                for r in 0..MR {
                    let av = a[(i + r) * k + t];
                    for l in 0..NR {
                        acc[r][l] += av * bp[l];
                    }
                }
            }
            for r in 0..MR {
                let crow = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for l in 0..NR {
                    crow[l] += acc[r][l];
                }
            }
            j += NR;
        }
        if j < n {
            for t in 0..k {
                let brow = &b[t * n..(t + 1) * n];
                for r in 0..MR {
                    let av = a[(i + r) * k + t];
                    let crow = &mut out[(i + r) * n..(i + r + 1) * n];
                    for jj in j..n {
                        crow[jj] += av * brow[jj];
                    }
                }
            }
        }
        i += MR;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
        i += 1;
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, out, m, k, n);
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let at = transpose(a, m, k);
    gemm_nn(&at, b, out, k, m, n);
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Max relative error between the analytic gradient and central finite
/// differences of `f` at `x`: `max_e |analytic_e − fd_e| / max(1, |analytic_e|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xid)?;
    if tape.value(y).numel() != 1 {
        return Err(TensorError::RankMismatch {
            op: "grad_check",
            expected: 1,
            shape: tape.value(y).shape().to_vec(),
        });
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xid)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let id = t.leaf(Tensor::new(x.shape().to_vec(), data)?, false);
        let out = f(&mut t, id)?;
        let v = t.value(out).data()[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                context: "grad_check evaluation".to_string(),
                index: 0,
                value: v,
            });
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for e in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[e] += h;
        let mut minus = x.data().to_vec();
        minus[e] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let rel = (analytic[e] - fd).abs() / analytic[e].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = t.constant(Tensor::identity(2));
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap());
        let z = t.constant(Tensor::zeros(vec![3, 4]));
        let c = t.matmul(a, z).unwrap();
        assert!(t.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![4, 2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    /// Naive triple-loop oracle, independent of the gemm kernels.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.rows_cols();
        let (_, n) = b.rows_cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_matches_naive_oracle_random_shapes() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..24 {
            let m = rng.random_range(1..=16);
            let k = rng.random_range(1..=16);
            let n = rng.random_range(1..=16);
            let a = randn(&mut rng, vec![m, k]);
            let b = randn(&mut rng, vec![k, n]);
            let mut t = Tape::new();
            let (ai, bi) = (t.constant(a.clone()), t.constant(b.clone()));
            let c = t.matmul(ai, bi).unwrap();
            let expect = naive_matmul(&a, &b);
            assert!(t.value(c).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = t.softmax(a).unwrap();
        for &v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = t.constant(Tensor::vector(vec![0.0, 2.0f64.ln()]));
        let s = t.softmax(b).unwrap();
        assert!((t.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_mask_sentinel_exact_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![5.0, f64::NEG_INFINITY, 5.0]));
        let s = t.softmax(a).unwrap();
        assert_eq!(t.value(s).data()[1], 0.0);
        assert!((t.value(s).data()[0] - 0.5).abs() < 1e-15);
        assert!((t.value(s).data()[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_degenerate_row_is_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![f64::NEG_INFINITY, f64::NEG_INFINITY]));
        assert!(matches!(
            t.softmax(a),
            Err(TensorError::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let x = randn(&mut rng, vec![5, 7]);
            let mut t = Tape::new();
            let id = t.constant(x);
            let s = t.softmax(id).unwrap();
            for r in 0..5 {
                let sum: f64 = t.value(s).row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g1 = t.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let b0 = t.constant(Tensor::zeros(vec![3]));
        let x = t.constant(Tensor::vector(vec![4.0, 4.0, 4.0]));
        let y = t.layer_norm(x, g1, b0, 1e-5).unwrap();
        for &v in t.value(y).data() {
            assert!(v.abs() < 1e-9);
        }

        let g = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = t.constant(Tensor::zeros(vec![2]));
        let x = t.constant(Tensor::vector(vec![1.0, 3.0]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((t.value(y).data()[0] + 1.0).abs() < 1e-6);
        assert!((t.value(y).data()[1] - 1.0).abs() < 1e-6);

        let g0 = t.constant(Tensor::zeros(vec![2]));
        let bb = t.constant(Tensor::vector(vec![2.5, -1.0]));
        let x = t.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = t.layer_norm(x, g0, bb, 1e-5).unwrap();
        for r in 0..3 {
            assert_eq!(t.value(y).row(r), &[2.5, -1.0]);
        }
    }

    #[test]
    fn gelu_asymptotics() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 8.0, -8.0]));
        let y = t.gelu(x);
        assert_eq!(t.value(y).data()[0], 0.0);
        assert!((t.value(y).data()[1] - 8.0).abs() < 1e-9);
        assert!(t.value(y).data()[2].abs() < 1e-9);
    }

    #[test]
    fn concat_split_conserves_gradient_mass() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = randn(&mut rng, vec![3, 4]);
        let b = randn(&mut rng, vec![3, 2]);
        let mut t = Tape::new();
        let ai = t.leaf(a, true);
        let bi = t.leaf(b, true);
        let cat = t.concat_cols(ai, bi).unwrap();
        // Split back and weigh the two halves differently so the gradient is
        // nontrivial, then compare total |grad| mass against direct paths.
        let left = t.slice_cols(cat, 0, 4).unwrap();
        let right = t.slice_cols(cat, 4, 2).unwrap();
        let ls = t.sum(left);
        let rs = t.sum(right);
        let rs3 = t.scale(rs, 3.0);
        let total = t.add(ls, rs3).unwrap();
        t.backward(total).unwrap();
        let ga: f64 = t.grad(ai).unwrap().iter().map(|v| v.abs()).sum();
        let gb: f64 = t.grad(bi).unwrap().iter().map(|v| v.abs()).sum();
        assert_eq!(ga, 12.0); // 3x4 ones
        assert_eq!(gb, 18.0); // 3x2 threes
    }

    #[test]
    fn ce_loss_uniform_logits_closed_form() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(vec![4, 11]));
        let loss = t
            .ce_loss_mean(logits, &[0, 3, 7, 10], &[true; 4])
            .unwrap();
        assert!((t.value(loss).data()[0] - (11.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_perfect_prediction_near_zero() {
        let mut t = Tape::new();
        let mut data = vec![0.0; 2 * 5];
        data[2] = 50.0;
        data[5 + 4] = 50.0;
        let logits = t.constant(Tensor::matrix(2, 5, data).unwrap());
        let loss = t.ce_loss_mean(logits, &[2, 4], &[true, true]).unwrap();
        assert!(t.value(loss).data()[0] < 1e-6);
    }

    #[test]
    fn ce_loss_all_padded_is_zero() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(vec![3, 4]));
        let loss = t.ce_loss_mean(logits, &[0, 0, 0], &[false; 3]).unwrap();
        assert_eq!(t.value(loss).data()[0], 0.0);
    }

    // ── Gradient checks ────────────────────────────────────────────────

    #[test]
    fn grad_check_quadratic_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]);
        let err = grad_check(
            |t, id| {
                let sq = t.matmul_nt(id, id);
                // x is rank-1; use elementwise route instead: sum(x*x) via
                // scale is unavailable, so square through gelu-free path:
                sq.map_err(|e| e)
            },
            &x,
            1e-5,
        );
        // rank-1 matmul_nt is rejected; check the documented route instead
        assert!(err.is_err());

        let x2 = Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = grad_check(
            |t, id| {
                let sq = t.matmul_nt(id, id)?; // [1,1] = sum of squares
                Ok(t.sum(sq))
            },
            &x2,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_check_ce_softmax() {
        let mut rng = StdRng::seed_from_u64(21);
        let x = randn(&mut rng, vec![3, 6]);
        let err = grad_check(
            |t, id| t.ce_loss_mean(id, &[1, 4, 0], &[true, true, true]),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn grad_check_core_ops() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let x = randn(&mut rng, vec![3, 5]);
            let w = randn(&mut rng, vec![5, 4]);
            let err = grad_check(
                |t, id| {
                    let wid = t.constant(w.clone());
                    let y = t.matmul(id, wid)?;
                    let a = t.gelu(y);
                    let s = t.softmax(a)?;
                    Ok(t.sum(s))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn grad_check_layer_norm_and_slice() {
        let mut rng = StdRng::seed_from_u64(9);
        let x = randn(&mut rng, vec![4, 6]);
        let gamma = randn(&mut rng, vec![6]);
        let beta = randn(&mut rng, vec![6]);
        let err = grad_check(
            |t, id| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let ln = t.layer_norm(id, g, b, 1e-5)?;
                let sl = t.slice_cols(ln, 1, 3)?;
                let rows = t.slice_rows(sl, 0, 2)?;
                Ok(t.sum(rows))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn grad_check_gather_and_concat() {
        let mut rng = StdRng::seed_from_u64(13);
        let table = randn(&mut rng, vec![5, 3]);
        let err = grad_check(
            |t, id| {
                let g = t.gather(id, &[0, 2, 2, 4])?;
                let cat = t.concat_cols(g, g)?;
                Ok(t.mean(cat))
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn masked_softmax_gradient_flows_only_through_allowed() {
        let x = Tensor::matrix(2, 3, vec![0.5, 0.2, -0.3, 1.0, -1.0, 0.0]).unwrap();
        let mask = Arc::new(
            AttnMask::new(2, 3, vec![true, false, true, true, true, false]).unwrap(),
        );
        let err = grad_check(
            |t, id| {
                let m = t.add_mask(id, mask.clone())?;
                let s = t.softmax(m)?;
                // weight the probabilities so gradients are asymmetric
                let w = t.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
                let y = t.matmul(s, w)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");

        // Blocked positions must get exactly zero gradient.
        let mut t = Tape::new();
        let id = t.leaf(x, true);
        let m = t.add_mask(id, mask).unwrap();
        let s = t.softmax(m).unwrap();
        let total = t.sum(s);
        t.backward(total).unwrap();
        let g = t.grad(id).unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[5], 0.0);
    }
}
