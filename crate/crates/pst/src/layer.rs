//! Masked linear layer: Y = (W ⊙ M)X with a per-step top-v mask.
//!
//! The mask is recomputed from the criterion's score on every training
//! forward. PST scores live on the tape behind a straight-through mask,
//! so score gradients reach the low-rank factors; the baseline criteria
//! (magnitude, movement, random, combined) keep their scores off-tape
//! and train a dense weight instead.

use crate::error::{Error, Result};
use crate::importance::{map_score, MvPState, ScoreConfig, ScoreState, ScoreVariant};
use crate::masking::{sparsity_to_v, top_v_mask, BinaryMask};
use crate::seeding::component_rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor2D;

/// Position a sparse layer occupies in the host model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    AttnQuery,
    AttnKey,
    AttnValue,
    AttnOutput,
    FfnInput,
    FfnOutput,
    Dense,
}

impl LayerRole {
    pub fn label(&self) -> &'static str {
        match self {
            LayerRole::AttnQuery => "attn.query",
            LayerRole::AttnKey => "attn.key",
            LayerRole::AttnValue => "attn.value",
            LayerRole::AttnOutput => "attn.output",
            LayerRole::FfnInput => "ffn.input",
            LayerRole::FfnOutput => "ffn.output",
            LayerRole::Dense => "dense",
        }
    }
}

/// Importance criterion deciding which weights a layer keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// Weight magnitude |W|; dense trainable weight.
    Map,
    /// Accumulated movement score, initialized to |w_init|.
    Mvp,
    /// Fixed random score drawn once at construction.
    Random,
    /// |W| plus a scaled movement accumulator (single trade-off alpha).
    Combined,
    /// Decomposed score over a frozen base weight.
    Pst(ScoreVariant),
}

impl Criterion {
    /// Tokens: map, mvp, random, combined, pst, pst:<terms> where terms
    /// is a `+`-separated subset of mag, ab, rc.
    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "map" => Ok(Criterion::Map),
            "mvp" => Ok(Criterion::Mvp),
            "random" => Ok(Criterion::Random),
            "combined" => Ok(Criterion::Combined),
            "pst" => Ok(Criterion::Pst(ScoreVariant::FULL)),
            _ => match token.strip_prefix("pst:") {
                Some(terms) => Ok(Criterion::Pst(ScoreVariant::parse(terms)?)),
                None => Err(Error::contract(format!(
                    "unknown criterion {token:?}; expected map, mvp, random, combined, pst, or pst:<terms>"
                ))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Criterion::Map => "map".into(),
            Criterion::Mvp => "mvp".into(),
            Criterion::Random => "random".into(),
            Criterion::Combined => "combined".into(),
            Criterion::Pst(v) if *v == ScoreVariant::FULL => "pst".into(),
            Criterion::Pst(v) => format!("pst:{}", v.label()),
        }
    }

    pub fn is_pst(&self) -> bool {
        matches!(self, Criterion::Pst(_))
    }
}

/// Optimizer grouping; the trainer maps groups to decay and lr scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Dense weights and the U, V update factors.
    WeightUpdate,
    /// The A, B score factors.
    ScoreFactor,
    /// Biases and layer-norm parameters.
    Bias,
}

pub struct ParamEntry<'a> {
    pub name: String,
    pub value: &'a Tensor2D,
    pub group: ParamGroup,
}

pub struct ParamEntryMut<'a> {
    pub name: String,
    pub value: &'a mut Tensor2D,
    pub group: ParamGroup,
}

/// Tape handles from one training forward.
pub struct LayerForward {
    pub output: TensorId,
    /// Hadamard product node; its gradient is dY·Xᵀ, the movement
    /// gradient shared by the R/C and MvP accumulators.
    pub masked_weight: TensorId,
    /// The dense weight used this step (w0 + bUV for PST, the trainable
    /// weight otherwise).
    pub effective_weight: TensorId,
    /// Leaf bindings for the optimizer, (param name, tape id).
    pub params: Vec<(String, TensorId)>,
}

pub struct SparseLinear {
    name: String,
    depth: usize,
    role: LayerRole,
    criterion: Criterion,
    // PST path.
    state: Option<ScoreState>,
    // Dense-criterion path.
    weight: Option<Tensor2D>,
    freeze_weight: bool,
    mvp: Option<MvPState>,
    random_score: Option<Tensor2D>,
    bias: Option<Tensor2D>,
    /// Trade-off of the combined criterion's movement term.
    combined_alpha: f64,
    current_mask: Option<BinaryMask>,
    last_sparsity: Option<f64>,
}

impl SparseLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        depth: usize,
        role: LayerRole,
        criterion: Criterion,
        n: usize,
        k: usize,
        with_bias: bool,
        freeze_weight: bool,
        config: ScoreConfig,
        init_std: f64,
        seed: u64,
    ) -> Self {
        // The base weight comes from a stream keyed only by the layer
        // name, so every criterion starts from the same matrix.
        let w_init = Tensor2D::gaussian(
            n,
            k,
            init_std,
            &mut component_rng(seed, &format!("{name}.weight")),
        );
        let mut layer = Self {
            name: name.to_string(),
            depth,
            role,
            criterion,
            state: None,
            weight: None,
            freeze_weight,
            mvp: None,
            random_score: None,
            bias: with_bias.then(|| Tensor2D::zeros(n, 1)),
            combined_alpha: config.legacy_alpha,
            current_mask: None,
            last_sparsity: None,
        };
        match criterion {
            Criterion::Pst(_) => {
                let mut rng = component_rng(seed, &format!("{name}.factors"));
                layer.state = Some(ScoreState::init(w_init, config, &mut rng));
            }
            Criterion::Map => {
                layer.weight = Some(w_init);
            }
            Criterion::Mvp => {
                layer.mvp = Some(MvPState::init(&w_init));
                layer.weight = Some(w_init);
            }
            Criterion::Combined => {
                layer.mvp = Some(MvPState::zeros(n, k));
                layer.weight = Some(w_init);
            }
            Criterion::Random => {
                let mut rng = component_rng(seed, &format!("{name}.random_score"));
                layer.random_score = Some(Tensor2D::gaussian(n, k, 1.0, &mut rng));
                layer.weight = Some(w_init);
            }
        }
        layer
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn role(&self) -> LayerRole {
        self.role
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn shape(&self) -> (usize, usize) {
        match (&self.state, &self.weight) {
            (Some(state), _) => state.shape(),
            (_, Some(w)) => w.shape(),
            _ => unreachable!("layer always has a state or a weight"),
        }
    }

    pub fn state(&self) -> Option<&ScoreState> {
        self.state.as_ref()
    }

    pub fn mvp(&self) -> Option<&MvPState> {
        self.mvp.as_ref()
    }

    pub fn current_mask(&self) -> Option<&BinaryMask> {
        self.current_mask.as_ref()
    }

    pub fn last_sparsity(&self) -> Option<f64> {
        self.last_sparsity
    }

    /// The dense weight the layer would use right now.
    pub fn effective_weight_value(&self) -> Tensor2D {
        match (&self.state, &self.weight) {
            (Some(state), _) => state.effective_weight(),
            (_, Some(w)) => w.clone(),
            _ => unreachable!(),
        }
    }

    /// Current importance score under this layer's criterion.
    pub fn score_value(&self) -> Tensor2D {
        match self.criterion {
            Criterion::Map => map_score(self.weight.as_ref().expect("map has a weight")),
            Criterion::Mvp => self.mvp.as_ref().expect("mvp has a score").s.clone(),
            Criterion::Random => self.random_score.as_ref().expect("random has a score").clone(),
            Criterion::Combined => {
                let w = self.weight.as_ref().expect("combined has a weight");
                let mvp = self.mvp.as_ref().expect("combined has an accumulator");
                map_score(w).add(&mvp.s.scale(self.combined_alpha)).expect("same shape")
            }
            Criterion::Pst(variant) => {
                self.state.as_ref().expect("pst has a state").score_variant(variant)
            }
        }
    }

    /// Records the masked forward pass. Mask selection happens here,
    /// fresh on every call.
    pub fn forward(&mut self, tape: &mut Tape, x: TensorId, sparsity: f64) -> Result<LayerForward> {
        let (n, k) = self.shape();
        let v = sparsity_to_v(n, k, sparsity)?;
        let m = tape.value(x).cols();

        let (effective, masked, params) = match self.criterion {
            Criterion::Pst(variant) => {
                let state = self.state.as_ref().expect("pst has a state");
                let cfg = state.config;
                let w0 = tape.constant(state.w0().clone());
                let u = tape.leaf(state.u.clone());
                let vf = tape.leaf(state.v.clone());
                let a = tape.leaf(state.a.clone());
                let b = tape.leaf(state.b.clone());
                let uv = tape.matmul(u, vf)?;
                let scaled_uv = tape.scale(uv, cfg.beta);
                let w_eff = tape.add(w0, scaled_uv)?;

                let mut score = None;
                if variant.magnitude {
                    score = Some(tape.abs(w_eff));
                }
                if variant.low_rank {
                    let ab = tape.matmul(a, b)?;
                    let term = tape.scale(ab, cfg.alpha1);
                    score = Some(match score {
                        Some(s) => tape.add(s, term)?,
                        None => term,
                    });
                }
                if variant.structured {
                    let r = tape.constant(state.r.clone());
                    let c = tape.constant(state.c.clone());
                    let rows = tape.broadcast_col(r, k)?;
                    let cols = tape.broadcast_row(c, n)?;
                    let rc = tape.add(rows, cols)?;
                    let term = tape.scale(rc, cfg.alpha2);
                    score = Some(match score {
                        Some(s) => tape.add(s, term)?,
                        None => term,
                    });
                }
                let score = score.expect("variant selects at least one term");
                let mask = tape.ste_mask(score, v)?;
                self.current_mask = Some(BinaryMask::from_tensor(tape.value(mask))?);
                let masked = tape.hadamard(w_eff, mask)?;
                let params = vec![
                    (format!("{}.u", self.name), u),
                    (format!("{}.v", self.name), vf),
                    (format!("{}.a", self.name), a),
                    (format!("{}.b", self.name), b),
                ];
                (w_eff, masked, params)
            }
            _ => {
                let weight = self.weight.as_ref().expect("dense criteria have a weight");
                let mask = top_v_mask(&self.score_value(), v)?;
                let mask_id = tape.constant(mask.to_tensor());
                self.current_mask = Some(mask);
                let (w_id, params) = if self.freeze_weight {
                    (tape.constant(weight.clone()), Vec::new())
                } else {
                    let id = tape.leaf(weight.clone());
                    (id, vec![(format!("{}.weight", self.name), id)])
                };
                let masked = tape.hadamard(w_id, mask_id)?;
                (w_id, masked, params)
            }
        };
        self.last_sparsity = Some(sparsity);

        let mut params = params;
        let mut output = tape.matmul(masked, x)?;
        if let Some(bias) = &self.bias {
            let b = tape.leaf(bias.clone());
            params.push((format!("{}.bias", self.name), b));
            let bb = tape.broadcast_col(b, m)?;
            output = tape.add(output, bb)?;
        }
        Ok(LayerForward { output, masked_weight: masked, effective_weight: effective, params })
    }

    /// Read-only forward with the weight frozen at its current mask;
    /// used for evaluation. Falls back to dense when the layer has never
    /// seen a training forward.
    pub fn forward_eval(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = tape.constant(self.eval_weight());
        let mut output = tape.matmul(w, x)?;
        if let Some(bias) = &self.bias {
            let m = tape.value(x).cols();
            let b = tape.constant(bias.clone());
            let bb = tape.broadcast_col(b, m)?;
            output = tape.add(output, bb)?;
        }
        Ok(output)
    }

    /// Effective weight under the current mask (dense if no mask yet).
    pub fn eval_weight(&self) -> Tensor2D {
        let w = self.effective_weight_value();
        match &self.current_mask {
            Some(mask) => w.hadamard(&mask.to_tensor()).expect("mask matches weight shape"),
            None => w,
        }
    }

    /// Recomputes the mask from current scores at the last scheduled
    /// sparsity. The trainer calls this once after the final optimizer
    /// step so diagnostics and finalize() see masks consistent with the
    /// final parameters.
    pub fn refresh_mask(&mut self) -> Result<()> {
        if let Some(sparsity) = self.last_sparsity {
            let (n, k) = self.shape();
            let v = sparsity_to_v(n, k, sparsity)?;
            self.current_mask = Some(top_v_mask(&self.score_value(), v)?);
        }
        Ok(())
    }

    /// Re-select the mask at an explicit sparsity. Checkpoint loads use
    /// this to rebuild the mask a finished run had selected.
    pub fn set_mask_sparsity(&mut self, sparsity: f64) -> Result<()> {
        self.last_sparsity = Some(sparsity);
        self.refresh_mask()
    }

    /// Sparse inference weight W* = effective weight ⊙ final mask.
    pub fn finalize(&self) -> Result<Tensor2D> {
        match &self.current_mask {
            Some(mask) => self
                .effective_weight_value()
                .hadamard(&mask.to_tensor()),
            None => Err(Error::contract(format!(
                "finalize on layer {} before any forward",
                self.name
            ))),
        }
    }

    /// Feeds the step's movement gradient into whichever accumulator the
    /// criterion maintains. Returns the (ΔR, ΔC) contribution for PST
    /// layers so the trainer can log a replayable trail.
    pub fn accumulate(
        &mut self,
        grad_w: &Tensor2D,
        w: &Tensor2D,
    ) -> Result<Option<(Tensor2D, Tensor2D)>> {
        match self.criterion {
            Criterion::Pst(_) => {
                let state = self.state.as_mut().expect("pst has a state");
                let movement = grad_w.hadamard(w)?;
                let dr = movement.row_sums().scale(-1.0);
                let dc = movement.col_sums().scale(-1.0);
                state.accumulate_structured(grad_w, w)?;
                Ok(Some((dr, dc)))
            }
            Criterion::Mvp | Criterion::Combined => {
                self.mvp.as_mut().expect("criterion has an accumulator").accumulate(grad_w, w)?;
                Ok(None)
            }
            Criterion::Map | Criterion::Random => Ok(None),
        }
    }

    /// Optimizer-visible parameters, in a stable order.
    pub fn params(&self) -> Vec<ParamEntry<'_>> {
        let mut entries = Vec::new();
        if let Some(state) = &self.state {
            entries.push(ParamEntry { name: format!("{}.u", self.name), value: &state.u, group: ParamGroup::WeightUpdate });
            entries.push(ParamEntry { name: format!("{}.v", self.name), value: &state.v, group: ParamGroup::WeightUpdate });
            entries.push(ParamEntry { name: format!("{}.a", self.name), value: &state.a, group: ParamGroup::ScoreFactor });
            entries.push(ParamEntry { name: format!("{}.b", self.name), value: &state.b, group: ParamGroup::ScoreFactor });
        }
        if let Some(w) = &self.weight {
            if !self.freeze_weight {
                entries.push(ParamEntry { name: format!("{}.weight", self.name), value: w, group: ParamGroup::WeightUpdate });
            }
        }
        if let Some(b) = &self.bias {
            entries.push(ParamEntry { name: format!("{}.bias", self.name), value: b, group: ParamGroup::Bias });
        }
        entries
    }

    pub fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        let name = self.name.clone();
        let mut entries = Vec::new();
        if let Some(state) = &mut self.state {
            entries.push(ParamEntryMut { name: format!("{name}.u"), value: &mut state.u, group: ParamGroup::WeightUpdate });
            entries.push(ParamEntryMut { name: format!("{name}.v"), value: &mut state.v, group: ParamGroup::WeightUpdate });
            entries.push(ParamEntryMut { name: format!("{name}.a"), value: &mut state.a, group: ParamGroup::ScoreFactor });
            entries.push(ParamEntryMut { name: format!("{name}.b"), value: &mut state.b, group: ParamGroup::ScoreFactor });
        }
        if !self.freeze_weight {
            if let Some(w) = &mut self.weight {
                entries.push(ParamEntryMut { name: format!("{name}.weight"), value: w, group: ParamGroup::WeightUpdate });
            }
        }
        if let Some(b) = &mut self.bias {
            entries.push(ParamEntryMut { name: format!("{name}.bias"), value: b, group: ParamGroup::Bias });
        }
        entries
    }

    /// Non-optimizer tensors that must survive a checkpoint round-trip.
    pub fn aux_tensors(&self) -> Vec<(String, &Tensor2D)> {
        let mut entries = Vec::new();
        if let Some(state) = &self.state {
            entries.push((format!("{}.w0", self.name), state.w0()));
            entries.push((format!("{}.r", self.name), &state.r));
            entries.push((format!("{}.c", self.name), &state.c));
        }
        if self.freeze_weight {
            if let Some(w) = &self.weight {
                entries.push((format!("{}.weight", self.name), w));
            }
        }
        if let Some(mvp) = &self.mvp {
            entries.push((format!("{}.mvp_s", self.name), &mvp.s));
        }
        if let Some(rs) = &self.random_score {
            entries.push((format!("{}.random_score", self.name), rs));
        }
        entries
    }

    /// Overwrites one tensor by its suffix (u, v, a, b, w0, r, c,
    /// weight, bias, mvp_s, random_score); checkpoint loading path.
    pub fn set_tensor(&mut self, suffix: &str, tensor: Tensor2D) -> Result<()> {
        let check = |current: &Tensor2D| {
            if current.shape() != tensor.shape() {
                Err(Error::shape("checkpoint tensor", current.shape(), tensor.shape()))
            } else {
                Ok(())
            }
        };
        match suffix {
            "u" | "v" | "a" | "b" | "w0" | "r" | "c" => {
                let state = self.state.as_mut().ok_or_else(|| {
                    Error::contract(format!("layer {} has no PST state", self.name))
                })?;
                let slot = match suffix {
                    "u" => &mut state.u,
                    "v" => &mut state.v,
                    "a" => &mut state.a,
                    "b" => &mut state.b,
                    "r" => &mut state.r,
                    "c" => &mut state.c,
                    _ => {
                        check(state.w0())?;
                        state.restore_w0(tensor);
                        return Ok(());
                    }
                };
                check(slot)?;
                *slot = tensor;
                Ok(())
            }
            "weight" => {
                let w = self.weight.as_mut().ok_or_else(|| {
                    Error::contract(format!("layer {} has no dense weight", self.name))
                })?;
                check(w)?;
                *w = tensor;
                Ok(())
            }
            "bias" => {
                let b = self.bias.as_mut().ok_or_else(|| {
                    Error::contract(format!("layer {} has no bias", self.name))
                })?;
                check(b)?;
                *b = tensor;
                Ok(())
            }
            "mvp_s" => {
                let mvp = self.mvp.as_mut().ok_or_else(|| {
                    Error::contract(format!("layer {} has no movement accumulator", self.name))
                })?;
                check(&mvp.s)?;
                mvp.s = tensor;
                Ok(())
            }
            "random_score" => {
                let rs = self.random_score.as_mut().ok_or_else(|| {
                    Error::contract(format!("layer {} has no random score", self.name))
                })?;
                check(rs)?;
                *rs = tensor;
                Ok(())
            }
            other => Err(Error::contract(format!(
                "layer {} has no tensor slot {other:?}",
                self.name
            ))),
        }
    }

    /// Trainable-plus-accumulated score/update parameters of this layer,
    /// by actual tensor sizes.
    pub fn score_param_count(&self) -> usize {
        match &self.state {
            Some(state) => {
                state.u.len() + state.v.len() + state.a.len() + state.b.len()
                    + state.r.len() + state.c.len()
            }
            None => {
                let w = self.weight.as_ref().expect("dense criteria have a weight").len();
                match self.criterion {
                    Criterion::Mvp | Criterion::Combined => w + self.mvp.as_ref().unwrap().s.len(),
                    Criterion::Random => w + self.random_score.as_ref().unwrap().len(),
                    _ => w,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pst_layer(n: usize, k: usize, seed: u64) -> SparseLinear {
        SparseLinear::new(
            "test",
            0,
            LayerRole::Dense,
            Criterion::Pst(ScoreVariant::FULL),
            n,
            k,
            false,
            false,
            ScoreConfig { r1: 2, r2: 2, ..Default::default() },
            0.5,
            seed,
        )
    }

    #[test]
    fn criterion_tokens_round_trip() {
        for token in ["map", "mvp", "random", "combined", "pst", "pst:mag+ab", "pst:rc"] {
            let c = Criterion::parse(token).unwrap();
            assert_eq!(c.label(), token);
        }
        assert!(Criterion::parse("pst:xyz").is_err());
        assert!(Criterion::parse("magnitude").is_err());
    }

    #[test]
    fn dense_forward_at_zero_sparsity() {
        let mut layer = pst_layer(3, 4, 1);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = Tensor2D::gaussian(4, 5, 1.0, &mut rng);
        let x = tape.constant(xv.clone());
        let fwd = layer.forward(&mut tape, x, 0.0).unwrap();
        let expected = layer.effective_weight_value().matmul(&xv).unwrap();
        assert_eq!(tape.value(fwd.output), &expected);
        assert_eq!(layer.current_mask().unwrap().ones_count(), 12);
    }

    #[test]
    fn full_sparsity_leaves_only_bias() {
        let mut layer = SparseLinear::new(
            "biased",
            0,
            LayerRole::Dense,
            Criterion::Map,
            3,
            4,
            true,
            false,
            ScoreConfig::default(),
            0.5,
            3,
        );
        layer.set_tensor("bias", Tensor2D::from_rows(&[&[1.0], &[2.0], &[3.0]])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2D::ones(4, 2));
        let fwd = layer.forward(&mut tape, x, 1.0).unwrap();
        assert_eq!(
            tape.value(fwd.output),
            &Tensor2D::from_rows(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]])
        );
    }

    #[test]
    fn known_mask_forward_by_hand() {
        let mut layer = SparseLinear::new(
            "hand", 0, LayerRole::Dense, Criterion::Map,
            2, 2, false, false, ScoreConfig::default(), 0.5, 4,
        );
        layer.set_tensor("weight", Tensor2D::from_rows(&[&[3.0, 1.0], &[-2.0, 4.0]])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2D::from_rows(&[&[1.0], &[1.0]]));
        // v = 2 keeps |3| and |4|: masked weight [[3,0],[0,4]].
        let fwd = layer.forward(&mut tape, x, 0.5).unwrap();
        assert_eq!(tape.value(fwd.output), &Tensor2D::from_rows(&[&[3.0], &[4.0]]));
    }

    #[test]
    fn masked_out_entries_get_zero_weight_gradient() {
        let mut layer = SparseLinear::new(
            "mapg", 0, LayerRole::Dense, Criterion::Map,
            4, 4, false, false, ScoreConfig::default(), 0.5, 5,
        );
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = tape.constant(Tensor2D::gaussian(4, 3, 1.0, &mut rng));
        let fwd = layer.forward(&mut tape, x, 0.5).unwrap();
        let loss = tape.sum(fwd.output);
        let grads = tape.backward(loss).unwrap();
        let (_, wid) = &fwd.params[0];
        let gw = grads.get(*wid).unwrap();
        let mask = layer.current_mask().unwrap();
        for r in 0..4 {
            for c in 0..4 {
                if !mask.get(r, c) {
                    assert_eq!(gw.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn alpha1_zero_kills_score_factor_gradients() {
        let mut layer = SparseLinear::new(
            "a1z", 0, LayerRole::Dense, Criterion::Pst(ScoreVariant::FULL),
            4, 4, false, false,
            ScoreConfig { alpha1: 0.0, r1: 2, r2: 2, ..Default::default() },
            0.5, 7,
        );
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = tape.constant(Tensor2D::gaussian(4, 3, 1.0, &mut rng));
        let fwd = layer.forward(&mut tape, x, 0.5).unwrap();
        let loss = tape.sum(fwd.output);
        let grads = tape.backward(loss).unwrap();
        for (name, id) in &fwd.params {
            if name.ends_with(".a") || name.ends_with(".b") {
                let g = grads.get(*id).unwrap();
                assert!(g.data().iter().all(|&v| v == 0.0), "{name} expected zero gradient");
            }
        }
    }

    // The straight-through score gradient against finite differences of
    // a surrogate loss whose mask stays frozen at the current support:
    // masked weight = w_eff ⊙ (M + S(θ) - S(θ0)). At θ = θ0 the products
    // agree and the surrogate's gradient is exactly the STE gradient.
    #[test]
    fn score_factor_gradients_match_frozen_mask_oracle() {
        let mut layer = pst_layer(3, 3, 9);
        // Non-trivial factors so every term participates.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        layer.set_tensor("v", Tensor2D::gaussian(2, 3, 0.3, &mut rng)).unwrap();
        layer.set_tensor("b", Tensor2D::gaussian(2, 3, 0.3, &mut rng)).unwrap();
        layer.set_tensor("r", Tensor2D::gaussian(3, 1, 0.2, &mut rng)).unwrap();
        layer.set_tensor("c", Tensor2D::gaussian(1, 3, 0.2, &mut rng)).unwrap();
        let xv = Tensor2D::gaussian(3, 4, 1.0, &mut rng);

        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let fwd = layer.forward(&mut tape, x, 0.5).unwrap();
        let loss = tape.sum(fwd.output);
        let grads = tape.backward(loss).unwrap();

        let state = layer.state().unwrap();
        let mask = layer.current_mask().unwrap().to_tensor();
        let score0 = layer.score_value();
        let w_eff = state.effective_weight();

        for (suffix, shape) in [("a", (3usize, 2usize)), ("b", (2, 3))] {
            let (name, id) = fwd
                .params
                .iter()
                .find(|(n, _)| n.ends_with(&format!(".{suffix}")))
                .unwrap();
            let base = if suffix == "a" { state.a.clone() } else { state.b.clone() };
            let fd = central_diff(
                |flat| {
                    let perturbed = Tensor2D::new(shape.0, shape.1, flat.to_vec()).unwrap();
                    let (a, b) = if suffix == "a" {
                        (&perturbed, &state.b)
                    } else {
                        (&state.a, &perturbed)
                    };
                    let ab = a.matmul(b).unwrap().scale(state.config.alpha1);
                    let rc = state.r.broadcast_col(3).unwrap()
                        .add(&state.c.broadcast_row(3).unwrap()).unwrap()
                        .scale(state.config.alpha2);
                    let score = w_eff.abs().add(&ab).unwrap().add(&rc).unwrap();
                    let surrogate_mask = mask.add(&score).unwrap().sub(&score0).unwrap();
                    let w = w_eff.hadamard(&surrogate_mask).unwrap();
                    w.matmul(&xv).unwrap().sum()
                },
                base.data(),
                1e-6,
            );
            let analytic = grads.get(*id).unwrap();
            assert!(
                max_rel_err(analytic.data(), &fd, 1e-8) < 1e-4,
                "{name} straight-through gradient disagrees with frozen-mask oracle"
            );
        }
    }

    #[test]
    fn finalize_counts_and_consistency() {
        let mut layer = pst_layer(64, 64, 11);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xv = Tensor2D::gaussian(64, 4, 1.0, &mut rng);
        let x = tape.constant(xv.clone());
        let fwd = layer.forward(&mut tape, x, 0.9).unwrap();

        let w_star = layer.finalize().unwrap();
        assert_eq!(w_star.count_nonzero(), 409);
        assert_eq!(layer.current_mask().unwrap().ones_count(), 409);

        // Inference on W* reproduces the last training forward.
        let y = w_star.matmul(&xv).unwrap();
        assert_eq!(&y, tape.value(fwd.output));
    }

    #[test]
    fn finalize_before_forward_is_an_error() {
        let layer = pst_layer(4, 4, 13);
        assert!(layer.finalize().is_err());
    }

    #[test]
    fn doubling_scores_keeps_output_bit_identical() {
        let run = |score_scale: f64, seed: u64| {
            let mut layer = SparseLinear::new(
                "scaled", 0, LayerRole::Dense, Criterion::Random,
                6, 6, false, false, ScoreConfig::default(), 0.5, seed,
            );
            let scaled = layer.random_score.as_ref().unwrap().scale(score_scale);
            layer.set_tensor("random_score", scaled).unwrap();
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = tape.constant(Tensor2D::gaussian(6, 3, 1.0, &mut rng));
            let fwd = layer.forward(&mut tape, x, 0.7).unwrap();
            tape.value(fwd.output).clone()
        };
        assert_eq!(run(1.0, 20), run(2.0, 20));
    }

    #[test]
    fn frozen_weight_stays_out_of_params() {
        let layer = SparseLinear::new(
            "frozen", 0, LayerRole::Dense, Criterion::Map,
            4, 4, true, true, ScoreConfig::default(), 0.5, 21,
        );
        let names: Vec<String> = layer.params().into_iter().map(|p| p.name).collect();
        assert_eq!(names, vec!["frozen.bias".to_string()]);
        // The frozen weight still persists through checkpoints.
        assert!(layer.aux_tensors().iter().any(|(n, _)| n == "frozen.weight"));
    }

    #[test]
    fn mvp_layer_accumulates_through_training_interface() {
        let mut layer = SparseLinear::new(
            "mv", 0, LayerRole::Dense, Criterion::Mvp,
            3, 3, false, false, ScoreConfig::default(), 0.5, 22,
        );
        // Movement score starts at |w_init|.
        let w0 = layer.effective_weight_value();
        assert_eq!(layer.mvp().unwrap().s, w0.abs());

        let grad = Tensor2D::ones(3, 3);
        let deltas = layer.accumulate(&grad, &w0).unwrap();
        assert!(deltas.is_none());
        let expected = w0.abs().add(&w0.scale(-1.0)).unwrap();
        assert_eq!(layer.mvp().unwrap().s, expected);
    }

    #[test]
    fn pst_accumulate_reports_deltas() {
        let mut layer = pst_layer(2, 2, 23);
        let grad = Tensor2D::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let w = Tensor2D::ones(2, 2);
        let (dr, dc) = layer.accumulate(&grad, &w).unwrap().unwrap();
        assert_eq!(dr, Tensor2D::from_rows(&[&[-3.0], &[-7.0]]));
        assert_eq!(dc, Tensor2D::from_rows(&[&[-4.0, -6.0]]));
        assert_eq!(layer.state().unwrap().r, dr);
        assert_eq!(layer.state().unwrap().c, dc);
    }

    #[test]
    fn same_seed_same_base_weight_across_criteria() {
        let map = SparseLinear::new(
            "shared", 0, LayerRole::Dense, Criterion::Map,
            5, 5, false, false, ScoreConfig::default(), 0.5, 24,
        );
        let pst = SparseLinear::new(
            "shared", 0, LayerRole::Dense, Criterion::Pst(ScoreVariant::FULL),
            5, 5, false, false, ScoreConfig::default(), 0.5, 24,
        );
        assert_eq!(map.effective_weight_value(), *pst.state().unwrap().w0());
        // And identical masks at t=0 for any budget.
        let mm = top_v_mask(&map.score_value(), 7).unwrap();
        let pm = top_v_mask(&pst.score_value(), 7).unwrap();
        assert_eq!(mm, pm);
    }
}
