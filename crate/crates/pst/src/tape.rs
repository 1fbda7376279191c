//! Reverse-mode automatic differentiation over `Tensor2D`.
//!
//! A `Tape` records operations as they execute (define-by-run). Values
//! are computed eagerly; `backward` replays the node list in reverse,
//! summing gradient contributions over fan-out. Leaves registered with
//! `leaf` receive gradients; tensors registered with `constant` never do,
//! which is how frozen base weights, masks, accumulators and data batches
//! are kept out of the differentiated parameter set.

use crate::error::{Error, Result};
use crate::masking::top_v_mask;
use crate::tensor::Tensor2D;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Node {
    Leaf,
    Constant,
    Matmul { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Abs { a: usize },
    Transpose { a: usize },
    BroadcastRow { a: usize },
    BroadcastCol { a: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    MeanCols { a: usize },
    Sum { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    SoftmaxRows { a: usize },
    LayerNormCols { x: usize, gamma: usize, beta: usize, eps: f64 },
    Mse { pred: usize, target: usize },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    SteMask { score: usize },
}

pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor2D>,
}

/// Gradients keyed by tensor id; absent entries mean the loss does not
/// depend on that tensor (treated as zero).
pub struct GradResult {
    grads: Vec<Option<Tensor2D>>,
}

impl GradResult {
    pub fn get(&self, id: TensorId) -> Option<&Tensor2D> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), values: Vec::new() }
    }

    fn push(&mut self, node: Node, value: Tensor2D) -> TensorId {
        self.nodes.push(node);
        self.values.push(value);
        TensorId(self.nodes.len() - 1)
    }

    /// Registers a tensor that should receive gradients.
    pub fn leaf(&mut self, value: Tensor2D) -> TensorId {
        self.push(Node::Leaf, value)
    }

    /// Registers a tensor excluded from differentiation.
    pub fn constant(&mut self, value: Tensor2D) -> TensorId {
        self.push(Node::Constant, value)
    }

    pub fn value(&self, id: TensorId) -> &Tensor2D {
        &self.values[id.0]
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.values[a.0].matmul(&self.values[b.0])?;
        Ok(self.push(Node::Matmul { a: a.0, b: b.0 }, value))
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.values[a.0].hadamard(&self.values[b.0])?;
        Ok(self.push(Node::Hadamard { a: a.0, b: b.0 }, value))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.values[a.0].add(&self.values[b.0])?;
        Ok(self.push(Node::Add { a: a.0, b: b.0 }, value))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.values[a.0].sub(&self.values[b.0])?;
        Ok(self.push(Node::Sub { a: a.0, b: b.0 }, value))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let value = self.values[a.0].scale(factor);
        self.push(Node::Scale { a: a.0, factor }, value)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let value = self.values[a.0].abs();
        self.push(Node::Abs { a: a.0 }, value)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let value = self.values[a.0].transpose();
        self.push(Node::Transpose { a: a.0 }, value)
    }

    pub fn broadcast_row(&mut self, a: TensorId, n: usize) -> Result<TensorId> {
        let value = self.values[a.0].broadcast_row(n)?;
        Ok(self.push(Node::BroadcastRow { a: a.0 }, value))
    }

    pub fn broadcast_col(&mut self, a: TensorId, k: usize) -> Result<TensorId> {
        let value = self.values[a.0].broadcast_col(k)?;
        Ok(self.push(Node::BroadcastCol { a: a.0 }, value))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let tensors: Vec<&Tensor2D> = parts.iter().map(|id| &self.values[id.0]).collect();
        let value = Tensor2D::concat_cols(&tensors)?;
        let ids = parts.iter().map(|id| id.0).collect();
        Ok(self.push(Node::ConcatCols { parts: ids }, value))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let value = self.values[a.0].slice_cols(start, len)?;
        Ok(self.push(Node::SliceCols { a: a.0, start }, value))
    }

    /// Mean over columns: n x m -> n x 1.
    pub fn mean_cols(&mut self, a: TensorId) -> TensorId {
        let m = self.values[a.0].cols();
        let value = self.values[a.0].row_sums().scale(1.0 / m as f64);
        self.push(Node::MeanCols { a: a.0 }, value)
    }

    /// Sum of all entries as a 1x1 scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let value = Tensor2D::filled(1, 1, self.values[a.0].sum());
        self.push(Node::Sum { a: a.0 }, value)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let value = self.values[a.0].map(|v| v.max(0.0));
        self.push(Node::Relu { a: a.0 }, value)
    }

    /// Tanh-form gelu; smooth everywhere, so finite differences apply.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let value = self.values[a.0].map(gelu_value);
        self.push(Node::Gelu { a: a.0 }, value)
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let value = softmax_rows_value(&self.values[a.0]);
        self.push(Node::SoftmaxRows { a: a.0 }, value)
    }

    /// Per-column layer normalization with per-feature gain and shift
    /// (gamma, beta are n x 1).
    pub fn layer_norm_cols(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let xv = &self.values[x.0];
        let (n, _) = xv.shape();
        if self.values[gamma.0].shape() != (n, 1) {
            return Err(Error::shape("layer_norm_cols gamma", (n, 1), self.values[gamma.0].shape()));
        }
        if self.values[beta.0].shape() != (n, 1) {
            return Err(Error::shape("layer_norm_cols beta", (n, 1), self.values[beta.0].shape()));
        }
        let (normalized, _) = layer_norm_cols_value(xv, eps);
        let mut out = normalized;
        let gv = &self.values[gamma.0];
        let bv = &self.values[beta.0];
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, gv.get(r, 0) * out.get(r, c) + bv.get(r, 0));
            }
        }
        Ok(self.push(Node::LayerNormCols { x: x.0, gamma: gamma.0, beta: beta.0, eps }, out))
    }

    /// Mean squared error over all entries, as a 1x1 scalar.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let diff = self.values[pred.0].sub(&self.values[target.0])?;
        let n = diff.len() as f64;
        let value = Tensor2D::filled(1, 1, diff.data().iter().map(|d| d * d).sum::<f64>() / n);
        Ok(self.push(Node::Mse { pred: pred.0, target: target.0 }, value))
    }

    /// Mean cross-entropy over columns; `labels[j]` is the class index of
    /// sample j (column j of the logits).
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let lv = &self.values[logits.0];
        let (classes, m) = lv.shape();
        if labels.len() != m {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for {m} logit columns",
                labels.len()
            )));
        }
        for &label in labels {
            if label >= classes {
                return Err(Error::Index { what: "class label", index: label, bound: classes });
            }
        }
        let mut total = 0.0;
        for (j, &label) in labels.iter().enumerate() {
            let col: Vec<f64> = (0..classes).map(|i| lv.get(i, j)).collect();
            let max = col.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let log_z = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total -= col[label] - log_z;
        }
        let value = Tensor2D::filled(1, 1, total / m as f64);
        Ok(self.push(Node::CrossEntropy { logits: logits.0, labels: labels.to_vec() }, value))
    }

    /// Top-v binary mask of the score values, with a straight-through
    /// backward: the incoming gradient passes to the score unchanged.
    pub fn ste_mask(&mut self, score: TensorId, v: usize) -> Result<TensorId> {
        let mask = top_v_mask(&self.values[score.0], v)?;
        Ok(self.push(Node::SteMask { score: score.0 }, mask.to_tensor()))
    }

    /// Gradients of a 1x1 scalar loss with respect to every reachable
    /// non-constant tensor on the tape.
    pub fn backward(&self, loss: TensorId) -> Result<GradResult> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Index { what: "tensor id", index: loss.0, bound: self.nodes.len() });
        }
        if self.values[loss.0].shape() != (1, 1) {
            let (r, c) = self.values[loss.0].shape();
            return Err(Error::contract(format!(
                "backward needs a 1x1 scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor2D::ones(1, 1));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(GradResult { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor2D>], id: usize, delta: Tensor2D) -> Result<()> {
        if matches!(self.nodes[id], Node::Constant) {
            return Ok(());
        }
        match &mut grads[id] {
            Some(g) => *g = g.add(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) -> Result<()> {
        match &self.nodes[i] {
            Node::Leaf | Node::Constant => {}
            Node::Matmul { a, b } => {
                let da = g.matmul(&self.values[*b].transpose())?;
                let db = self.values[*a].transpose().matmul(g)?;
                self.add_grad(grads, *a, da)?;
                self.add_grad(grads, *b, db)?;
            }
            Node::Hadamard { a, b } => {
                self.add_grad(grads, *a, g.hadamard(&self.values[*b])?)?;
                self.add_grad(grads, *b, g.hadamard(&self.values[*a])?)?;
            }
            Node::Add { a, b } => {
                self.add_grad(grads, *a, g.clone())?;
                self.add_grad(grads, *b, g.clone())?;
            }
            Node::Sub { a, b } => {
                self.add_grad(grads, *a, g.clone())?;
                self.add_grad(grads, *b, g.scale(-1.0))?;
            }
            Node::Scale { a, factor } => {
                self.add_grad(grads, *a, g.scale(*factor))?;
            }
            Node::Abs { a } => {
                self.add_grad(grads, *a, g.hadamard(&self.values[*a].signum0())?)?;
            }
            Node::Transpose { a } => {
                self.add_grad(grads, *a, g.transpose())?;
            }
            Node::BroadcastRow { a } => {
                self.add_grad(grads, *a, g.col_sums())?;
            }
            Node::BroadcastCol { a } => {
                self.add_grad(grads, *a, g.row_sums())?;
            }
            Node::ConcatCols { parts } => {
                let mut start = 0;
                for &p in parts {
                    let width = self.values[p].cols();
                    self.add_grad(grads, p, g.slice_cols(start, width)?)?;
                    start += width;
                }
            }
            Node::SliceCols { a, start } => {
                let (rows, cols) = self.values[*a].shape();
                let mut da = Tensor2D::zeros(rows, cols);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(r, start + c, g.get(r, c));
                    }
                }
                self.add_grad(grads, *a, da)?;
            }
            Node::MeanCols { a } => {
                let m = self.values[*a].cols();
                self.add_grad(grads, *a, g.scale(1.0 / m as f64).broadcast_col(m)?)?;
            }
            Node::Sum { a } => {
                let (rows, cols) = self.values[*a].shape();
                self.add_grad(grads, *a, Tensor2D::filled(rows, cols, g.get(0, 0)))?;
            }
            Node::Relu { a } => {
                let gate = self.values[*a].map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.add_grad(grads, *a, g.hadamard(&gate)?)?;
            }
            Node::Gelu { a } => {
                let deriv = self.values[*a].map(gelu_derivative);
                self.add_grad(grads, *a, g.hadamard(&deriv)?)?;
            }
            Node::SoftmaxRows { a } => {
                // Per row: da_j = y_j * (g_j - sum_l g_l y_l).
                let y = &self.values[i];
                let mut da = Tensor2D::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                    for c in 0..y.cols() {
                        da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                self.add_grad(grads, *a, da)?;
            }
            Node::LayerNormCols { x, gamma, beta, eps } => {
                let xv = &self.values[*x];
                let gv = &self.values[*gamma];
                let (n, m) = xv.shape();
                let (normalized, inv_std) = layer_norm_cols_value(xv, *eps);
                let mut dgamma = Tensor2D::zeros(n, 1);
                let mut dbeta = Tensor2D::zeros(n, 1);
                let mut dx = Tensor2D::zeros(n, m);
                for c in 0..m {
                    // dxh is the gradient at the normalized activations.
                    let mut dxh = vec![0.0; n];
                    for r in 0..n {
                        let gi = g.get(r, c);
                        dbeta.set(r, 0, dbeta.get(r, 0) + gi);
                        dgamma.set(r, 0, dgamma.get(r, 0) + gi * normalized.get(r, c));
                        dxh[r] = gi * gv.get(r, 0);
                    }
                    let mean_dxh: f64 = dxh.iter().sum::<f64>() / n as f64;
                    let mean_dxh_xh: f64 = (0..n)
                        .map(|r| dxh[r] * normalized.get(r, c))
                        .sum::<f64>()
                        / n as f64;
                    for r in 0..n {
                        let v = inv_std[c]
                            * (dxh[r] - mean_dxh - normalized.get(r, c) * mean_dxh_xh);
                        dx.set(r, c, v);
                    }
                }
                self.add_grad(grads, *x, dx)?;
                self.add_grad(grads, *gamma, dgamma)?;
                self.add_grad(grads, *beta, dbeta)?;
            }
            Node::Mse { pred, target } => {
                let diff = self.values[*pred].sub(&self.values[*target])?;
                let scale = 2.0 * g.get(0, 0) / diff.len() as f64;
                self.add_grad(grads, *pred, diff.scale(scale))?;
                self.add_grad(grads, *target, diff.scale(-scale))?;
            }
            Node::CrossEntropy { logits, labels } => {
                let lv = &self.values[*logits];
                let (classes, m) = lv.shape();
                let scale = g.get(0, 0) / m as f64;
                let mut dl = Tensor2D::zeros(classes, m);
                for (j, &label) in labels.iter().enumerate() {
                    let col: Vec<f64> = (0..classes).map(|r| lv.get(r, j)).collect();
                    let max = col.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
                    for r in 0..classes {
                        let p = (col[r] - max).exp() / z;
                        let indicator = if r == label { 1.0 } else { 0.0 };
                        dl.set(r, j, scale * (p - indicator));
                    }
                }
                self.add_grad(grads, *logits, dl)?;
            }
            Node::SteMask { score } => {
                // Straight-through: the mask is treated as identity.
                self.add_grad(grads, *score, g.clone())?;
            }
        }
        Ok(())
    }
}

fn gelu_value(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows_value(a: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let max = (0..a.cols()).map(|c| a.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..a.cols()).map(|c| (a.get(r, c) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..a.cols() {
            out.set(r, c, exps[c] / z);
        }
    }
    out
}

/// Normalized activations and per-column 1/std for layer_norm_cols.
fn layer_norm_cols_value(x: &Tensor2D, eps: f64) -> (Tensor2D, Vec<f64>) {
    let (n, m) = x.shape();
    let mut normalized = Tensor2D::zeros(n, m);
    let mut inv_std = vec![0.0; m];
    for c in 0..m {
        let mean: f64 = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[c] = inv;
        for r in 0..n {
            normalized.set(r, c, (x.get(r, c) - mean) * inv);
        }
    }
    (normalized, inv_std)
}
