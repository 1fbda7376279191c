//! Desk-scale model zoo: an MLP of sparse layers and a tiny single-head
//! transformer block.
//!
//! Samples are columns throughout. Batched sequences arrive flattened,
//! batch*seq_len columns wide, and the transformer slices them back apart
//! for attention and pooling. Only SparseLinear weights are ever masked;
//! layer-norm parameters and the dense head stay dense and trainable.

use crate::error::{Error, Result};
use crate::importance::ScoreConfig;
use crate::layer::{
    Criterion, LayerForward, LayerRole, ParamEntry, ParamEntryMut, ParamGroup, SparseLinear,
};
use crate::seeding::component_rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor2D;

const LN_EPS: f64 = 1e-5;

/// Plain trainable linear map, used for task heads. Never masked.
pub struct DenseLayer {
    name: String,
    weight: Tensor2D,
    bias: Tensor2D,
}

impl DenseLayer {
    pub fn new(name: &str, n: usize, k: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, &format!("{name}.weight"));
        let std = 1.0 / (k as f64).sqrt();
        DenseLayer {
            name: name.to_string(),
            weight: Tensor2D::gaussian(n, k, std, &mut rng),
            bias: Tensor2D::zeros(n, 1),
        }
    }

    fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<(TensorId, Vec<(String, TensorId)>)> {
        let w = tape.leaf(self.weight.clone());
        let b = tape.leaf(self.bias.clone());
        let wx = tape.matmul(w, x)?;
        let cols = tape.value(wx).cols();
        let bb = tape.broadcast_col(b, cols)?;
        let out = tape.add(wx, bb)?;
        Ok((
            out,
            vec![
                (format!("{}.weight", self.name), w),
                (format!("{}.bias", self.name), b),
            ],
        ))
    }

    fn forward_eval(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let wx = tape.matmul(w, x)?;
        let cols = tape.value(wx).cols();
        let bb = tape.broadcast_col(b, cols)?;
        tape.add(wx, bb)
    }

    fn params(&self) -> Vec<ParamEntry<'_>> {
        vec![
            ParamEntry {
                name: format!("{}.weight", self.name),
                value: &self.weight,
                group: ParamGroup::WeightUpdate,
            },
            ParamEntry {
                name: format!("{}.bias", self.name),
                value: &self.bias,
                group: ParamGroup::Bias,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        vec![
            ParamEntryMut {
                name: format!("{}.weight", self.name),
                value: &mut self.weight,
                group: ParamGroup::WeightUpdate,
            },
            ParamEntryMut {
                name: format!("{}.bias", self.name),
                value: &mut self.bias,
                group: ParamGroup::Bias,
            },
        ]
    }
}

/// Everything the trainer needs from one training forward.
pub struct ModelForward {
    pub output: TensorId,
    /// One entry per sparse layer, in `sparse_layers()` order.
    pub layers: Vec<LayerForward>,
    /// Every trainable leaf placed on the tape, in `params()` order.
    pub params: Vec<(String, TensorId)>,
}

/// Chain of sparse layers with relu between them and an optional dense
/// head on top.
pub struct MlpModel {
    layers: Vec<SparseLinear>,
    head: Option<DenseLayer>,
}

impl MlpModel {
    /// `dims` chains layer i as dims[i] -> dims[i+1]; weights init at
    /// std 1/sqrt(fan_in) from per-layer seed streams.
    pub fn new(
        dims: &[usize],
        head_out: Option<usize>,
        criterion: Criterion,
        config: ScoreConfig,
        freeze_weights: bool,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("mlp needs at least two dims"));
        }
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let (k, n) = (pair[0], pair[1]);
            layers.push(SparseLinear::new(
                &format!("layer{i}"),
                i,
                LayerRole::Dense,
                criterion,
                n,
                k,
                true,
                freeze_weights,
                config,
                1.0 / (k as f64).sqrt(),
                seed,
            ));
        }
        let head = head_out.map(|out| DenseLayer::new("head", out, *dims.last().unwrap(), seed));
        Ok(MlpModel { layers, head })
    }

    fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        sparsity: f64,
    ) -> Result<ModelForward> {
        let mut h = x;
        let mut fwds = Vec::new();
        let mut params = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let fwd = layer.forward(tape, h, sparsity)?;
            h = fwd.output;
            if i < last {
                h = tape.relu(h);
            }
            params.extend(fwd.params.iter().cloned());
            fwds.push(fwd);
        }
        if let Some(head) = &self.head {
            let (out, head_params) = head.forward(tape, h)?;
            h = out;
            params.extend(head_params);
        }
        Ok(ModelForward { output: h, layers: fwds, params })
    }

    fn forward_eval(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_eval(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        match &self.head {
            Some(head) => head.forward_eval(tape, h),
            None => Ok(h),
        }
    }
}

/// Single-head post-norm transformer block with a mean-pool classifier.
///
/// All six weight matrices are independently maskable and tagged by
/// role; the two layer norms and the head are dense.
pub struct TinyTransformer {
    d: usize,
    seq_len: usize,
    layers: Vec<SparseLinear>,
    ln1_gamma: Tensor2D,
    ln1_beta: Tensor2D,
    ln2_gamma: Tensor2D,
    ln2_beta: Tensor2D,
    head: DenseLayer,
}

/// Tape handles for the block's layer-norm parameters; the train and
/// eval paths fill them with leaves or constants respectively.
struct BlockParts {
    ln1: (TensorId, TensorId),
    ln2: (TensorId, TensorId),
}

/// Attention, residual/norm, FFN, residual/norm, mean-pool. `apply`
/// runs sparse layer i on an input, so train and eval share the exact
/// graph shape while wiring weights differently.
fn block_topology(
    tape: &mut Tape,
    x: TensorId,
    d: usize,
    seq_len: usize,
    parts: &BlockParts,
    apply: &mut dyn FnMut(&mut Tape, usize, TensorId) -> Result<TensorId>,
) -> Result<TensorId> {
    let cols = tape.value(x).cols();
    if cols % seq_len != 0 {
        return Err(Error::contract(format!(
            "input has {cols} columns, not a multiple of seq_len {seq_len}"
        )));
    }
    let batch = cols / seq_len;

    let q = apply(tape, 0, x)?;
    let k = apply(tape, 1, x)?;
    let v = apply(tape, 2, x)?;

    // Per-example attention over the flattened columns. Row i of the
    // softmax holds query position i's distribution over keys.
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut attended = Vec::with_capacity(batch);
    for e in 0..batch {
        let start = e * seq_len;
        let qe = tape.slice_cols(q, start, seq_len)?;
        let ke = tape.slice_cols(k, start, seq_len)?;
        let ve = tape.slice_cols(v, start, seq_len)?;
        let qt = tape.transpose(qe);
        let scores = tape.matmul(qt, ke)?;
        let scaled = tape.scale(scores, inv_sqrt_d);
        let attn = tape.softmax_rows(scaled);
        let attn_t = tape.transpose(attn);
        attended.push(tape.matmul(ve, attn_t)?);
    }
    let concat = tape.concat_cols(&attended)?;
    let o = apply(tape, 3, concat)?;

    let res1 = tape.add(x, o)?;
    let (g1, b1) = parts.ln1;
    let h1 = tape.layer_norm_cols(res1, g1, b1, LN_EPS)?;

    let f_in = apply(tape, 4, h1)?;
    let act = tape.gelu(f_in);
    let f_out = apply(tape, 5, act)?;
    let res2 = tape.add(h1, f_out)?;
    let (g2, b2) = parts.ln2;
    let h2 = tape.layer_norm_cols(res2, g2, b2, LN_EPS)?;

    // One pooled column per example.
    let mut pooled = Vec::with_capacity(batch);
    for e in 0..batch {
        let he = tape.slice_cols(h2, e * seq_len, seq_len)?;
        pooled.push(tape.mean_cols(he));
    }
    tape.concat_cols(&pooled)
}

impl TinyTransformer {
    pub fn new(
        d: usize,
        seq_len: usize,
        classes: usize,
        criterion: Criterion,
        config: ScoreConfig,
        freeze_weights: bool,
        seed: u64,
    ) -> Result<Self> {
        if d < 4 {
            return Err(Error::contract("transformer model dim must be at least 4"));
        }
        if seq_len == 0 || classes < 2 {
            return Err(Error::contract("transformer needs seq_len >= 1 and classes >= 2"));
        }
        let spec: [(&str, LayerRole, usize, usize); 6] = [
            ("block0.attn.query", LayerRole::AttnQuery, d, d),
            ("block0.attn.key", LayerRole::AttnKey, d, d),
            ("block0.attn.value", LayerRole::AttnValue, d, d),
            ("block0.attn.output", LayerRole::AttnOutput, d, d),
            ("block0.ffn.input", LayerRole::FfnInput, 4 * d, d),
            ("block0.ffn.output", LayerRole::FfnOutput, d, 4 * d),
        ];
        let layers = spec
            .iter()
            .map(|&(name, role, n, k)| {
                SparseLinear::new(
                    name,
                    0,
                    role,
                    criterion,
                    n,
                    k,
                    true,
                    freeze_weights,
                    config,
                    1.0 / (k as f64).sqrt(),
                    seed,
                )
            })
            .collect();
        Ok(TinyTransformer {
            d,
            seq_len,
            layers,
            ln1_gamma: Tensor2D::ones(d, 1),
            ln1_beta: Tensor2D::zeros(d, 1),
            ln2_gamma: Tensor2D::ones(d, 1),
            ln2_beta: Tensor2D::zeros(d, 1),
            head: DenseLayer::new("head", classes, d, seed),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        sparsity: f64,
    ) -> Result<ModelForward> {
        let ln_leaves = [
            tape.leaf(self.ln1_gamma.clone()),
            tape.leaf(self.ln1_beta.clone()),
            tape.leaf(self.ln2_gamma.clone()),
            tape.leaf(self.ln2_beta.clone()),
        ];
        let parts = BlockParts {
            ln1: (ln_leaves[0], ln_leaves[1]),
            ln2: (ln_leaves[2], ln_leaves[3]),
        };
        let (d, seq_len) = (self.d, self.seq_len);

        let mut fwds: Vec<Option<LayerForward>> = (0..self.layers.len()).map(|_| None).collect();
        let layers = &mut self.layers;
        let mut apply = |tape: &mut Tape, i: usize, input: TensorId| -> Result<TensorId> {
            let fwd = layers[i].forward(tape, input, sparsity)?;
            let out = fwd.output;
            fwds[i] = Some(fwd);
            Ok(out)
        };
        let pooled = block_topology(tape, x, d, seq_len, &parts, &mut apply)?;

        let (out, head_params) = self.head.forward(tape, pooled)?;

        let mut layer_fwds = Vec::with_capacity(self.layers.len());
        let mut params = Vec::new();
        for fwd in fwds.into_iter() {
            let fwd = fwd.expect("topology applies every sparse layer exactly once");
            params.extend(fwd.params.iter().cloned());
            layer_fwds.push(fwd);
        }
        for (name, id) in [
            ("block0.ln1.gamma", ln_leaves[0]),
            ("block0.ln1.beta", ln_leaves[1]),
            ("block0.ln2.gamma", ln_leaves[2]),
            ("block0.ln2.beta", ln_leaves[3]),
        ] {
            params.push((name.to_string(), id));
        }
        params.extend(head_params);
        Ok(ModelForward { output: out, layers: layer_fwds, params })
    }

    fn forward_eval(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let parts = BlockParts {
            ln1: (
                tape.constant(self.ln1_gamma.clone()),
                tape.constant(self.ln1_beta.clone()),
            ),
            ln2: (
                tape.constant(self.ln2_gamma.clone()),
                tape.constant(self.ln2_beta.clone()),
            ),
        };
        let layers = &self.layers;
        let mut apply = |tape: &mut Tape, i: usize, input: TensorId| -> Result<TensorId> {
            layers[i].forward_eval(tape, input)
        };
        let pooled = block_topology(tape, x, self.d, self.seq_len, &parts, &mut apply)?;
        self.head.forward_eval(tape, pooled)
    }
}

/// The zoo's unified front. The trainer only ever talks to this.
pub enum Model {
    Mlp(MlpModel),
    Transformer(TinyTransformer),
}

impl Model {
    /// Training forward: recomputes every mask at `sparsity` and leaves
    /// trainable leaves on the tape for backward.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: &Tensor2D,
        sparsity: f64,
    ) -> Result<ModelForward> {
        let xid = tape.constant(x.clone());
        match self {
            Model::Mlp(m) => m.forward_train(tape, xid, sparsity),
            Model::Transformer(t) => t.forward_train(tape, xid, sparsity),
        }
    }

    /// Inference on the current masks; read-only, no gradient plumbing.
    pub fn forward_eval(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let out = match self {
            Model::Mlp(m) => m.forward_eval(&mut tape, xid),
            Model::Transformer(t) => t.forward_eval(&mut tape, xid),
        }?;
        Ok(tape.value(out).clone())
    }

    pub fn sparse_layers(&self) -> Vec<&SparseLinear> {
        match self {
            Model::Mlp(m) => m.layers.iter().collect(),
            Model::Transformer(t) => t.layers.iter().collect(),
        }
    }

    pub fn sparse_layers_mut(&mut self) -> Vec<&mut SparseLinear> {
        match self {
            Model::Mlp(m) => m.layers.iter_mut().collect(),
            Model::Transformer(t) => t.layers.iter_mut().collect(),
        }
    }

    /// Optimizer registry: every trainable tensor, in the same order the
    /// training forward pushes its leaves.
    pub fn params(&self) -> Vec<ParamEntry<'_>> {
        let mut out = Vec::new();
        match self {
            Model::Mlp(m) => {
                for layer in &m.layers {
                    out.extend(layer.params());
                }
                if let Some(head) = &m.head {
                    out.extend(head.params());
                }
            }
            Model::Transformer(t) => {
                for layer in &t.layers {
                    out.extend(layer.params());
                }
                for (name, value) in [
                    ("block0.ln1.gamma", &t.ln1_gamma),
                    ("block0.ln1.beta", &t.ln1_beta),
                    ("block0.ln2.gamma", &t.ln2_gamma),
                    ("block0.ln2.beta", &t.ln2_beta),
                ] {
                    out.push(ParamEntry {
                        name: name.to_string(),
                        value,
                        group: ParamGroup::Bias,
                    });
                }
                out.extend(t.head.params());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        let mut out = Vec::new();
        match self {
            Model::Mlp(m) => {
                for layer in &mut m.layers {
                    out.extend(layer.params_mut());
                }
                if let Some(head) = &mut m.head {
                    out.extend(head.params_mut());
                }
            }
            Model::Transformer(t) => {
                for layer in &mut t.layers {
                    out.extend(layer.params_mut());
                }
                for (name, value) in [
                    ("block0.ln1.gamma", &mut t.ln1_gamma),
                    ("block0.ln1.beta", &mut t.ln1_beta),
                    ("block0.ln2.gamma", &mut t.ln2_gamma),
                    ("block0.ln2.beta", &mut t.ln2_beta),
                ] {
                    out.push(ParamEntryMut {
                        name: name.to_string(),
                        value,
                        group: ParamGroup::Bias,
                    });
                }
                out.extend(t.head.params_mut());
            }
        }
        out
    }

    /// Non-trainable state that still has to survive checkpoints.
    pub fn aux_tensors(&self) -> Vec<(String, &Tensor2D)> {
        self.sparse_layers()
            .into_iter()
            .flat_map(|layer| layer.aux_tensors())
            .collect()
    }

    /// Checkpoint-load path for aux tensors, routed to the owning layer
    /// by name prefix.
    pub fn set_aux(&mut self, name: &str, tensor: Tensor2D) -> Result<()> {
        for layer in self.sparse_layers_mut() {
            let prefix = format!("{}.", layer.name());
            if let Some(suffix) = name.strip_prefix(&prefix) {
                return layer.set_tensor(suffix, tensor);
            }
        }
        Err(Error::checkpoint(format!("aux tensor {name} matches no layer")))
    }

    /// Overwrite one trainable parameter by registry name.
    pub fn set_param(&mut self, name: &str, tensor: Tensor2D) -> Result<()> {
        for entry in self.params_mut() {
            if entry.name == name {
                if entry.value.shape() != tensor.shape() {
                    return Err(Error::checkpoint(format!(
                        "param {name} has shape {:?}, checkpoint holds {:?}",
                        entry.value.shape(),
                        tensor.shape()
                    )));
                }
                *entry.value = tensor;
                return Ok(());
            }
        }
        Err(Error::checkpoint(format!("unknown param {name}")))
    }
}
