//! The sparse training loop: schedule, fresh masks, backward, movement
//! accumulation, AdamW, logging. One `Trainer` owns one run.
//!
//! Step order is load-bearing. Accumulators consume the raw movement
//! gradient dY·Xᵀ taken at the masked-product node, before any clipping,
//! while the optimizer sees the clipped leaf gradients. Batches are
//! positional: epoch order is a pure function of (seed, epoch), so a
//! resumed run replays the exact batch sequence with no RNG state in
//! the checkpoint.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{SyntheticTask, Targets};
use crate::error::{Error, Result};
use crate::layer::{ParamEntryMut, ParamGroup};
use crate::masking::BinaryMask;
use crate::model::Model;
use crate::schedule::SparsitySchedule;
use crate::seeding::component_rng;
use crate::tape::Tape;
use crate::tensor::Tensor2D;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EVAL_BATCH: usize = 256;

/// Everything the loop needs beyond the model and task.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub target_p: f64,
    pub warmup_frac: f64,
    pub cooldown_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub score_lr_scale: f64,
    pub log_structured_deltas: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            total_steps: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            target_p: 0.9,
            warmup_frac: 0.1,
            cooldown_frac: 0.3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            score_lr_scale: 1.0,
            log_structured_deltas: false,
        }
    }
}

/// Decoupled-decay Adam over the model's parameter registry.
///
/// Moments are keyed by registry order; weight decay applies only to the
/// weight-update group, and the score-factor group gets its own learning
/// rate multiple. The frozen base weights and the R, C accumulators are
/// never registered here.
pub struct AdamW {
    names: Vec<String>,
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
    t: usize,
    weight_decay: f64,
    score_lr_scale: f64,
    clip_norm: f64,
}

impl AdamW {
    pub fn new(model: &Model, options: &TrainOptions) -> Self {
        let params = model.params();
        AdamW {
            names: params.iter().map(|p| p.name.clone()).collect(),
            m: params
                .iter()
                .map(|p| Tensor2D::zeros(p.value.rows(), p.value.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor2D::zeros(p.value.rows(), p.value.cols()))
                .collect(),
            t: 0,
            weight_decay: options.weight_decay,
            score_lr_scale: options.score_lr_scale,
            clip_norm: options.clip_norm,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Moment pairs in registry order, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor2D, &Tensor2D)> {
        self.names
            .iter()
            .zip(self.m.iter().zip(self.v.iter()))
            .map(|(n, (m, v))| (n.as_str(), m, v))
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Checkpoint-load path; moments must arrive in registry order.
    pub fn restore(&mut self, t: usize, moments: Vec<(String, Tensor2D, Tensor2D)>) -> Result<()> {
        if moments.len() != self.names.len() {
            return Err(Error::checkpoint(format!(
                "optimizer holds {} parameters, checkpoint holds {}",
                self.names.len(),
                moments.len()
            )));
        }
        for (i, (name, m, v)) in moments.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::checkpoint(format!(
                    "optimizer moment order mismatch: expected {}, found {name}",
                    self.names[i]
                )));
            }
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(Error::checkpoint(format!("moment shape mismatch for {name}")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        self.t = t;
        Ok(())
    }

    /// One update over all registered parameters. `grads` aligns with
    /// the registry; clipping rescales the whole set by the global norm
    /// before any moment sees it.
    pub fn step(
        &mut self,
        params: Vec<ParamEntryMut<'_>>,
        grads: &[Tensor2D],
        lr_now: f64,
    ) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(Error::contract(format!(
                "optimizer expects {} parameters, got {} with {} gradients",
                self.names.len(),
                params.len(),
                grads.len()
            )));
        }
        let mut sq_norm = 0.0;
        for g in grads {
            sq_norm += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq_norm.sqrt();
        let clip_scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);

        for (i, entry) in params.into_iter().enumerate() {
            if entry.name != self.names[i] {
                return Err(Error::contract(format!(
                    "parameter registry order changed: expected {}, found {}",
                    self.names[i], entry.name
                )));
            }
            let lr_i = match entry.group {
                ParamGroup::ScoreFactor => lr_now * self.score_lr_scale,
                _ => lr_now,
            };
            let decay = match entry.group {
                ParamGroup::WeightUpdate => self.weight_decay,
                _ => 0.0,
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = entry.value.data_mut();
            let g = grads[i].data();
            for j in 0..theta.len() {
                let gj = g[j] * clip_scale;
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr_i * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * theta[j]);
            }
        }
        Ok(())
    }
}

/// Final mask of one layer, in report form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRecord {
    pub layer: String,
    pub role: String,
    pub depth: usize,
    pub rows: usize,
    pub cols: usize,
    pub bits: String,
}

impl MaskRecord {
    pub fn to_mask(&self) -> Result<BinaryMask> {
        BinaryMask::from_bit_string(self.rows, self.cols, &self.bits)
    }
}

/// Everything a finished run reports. Wall clock is informational and
/// excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub criterion: String,
    pub seed: u64,
    pub loss_trajectory: Vec<f64>,
    pub sparsity_trajectory: Vec<f64>,
    pub final_metric: f64,
    pub metric_name: String,
    pub masks: Vec<MaskRecord>,
    /// Optimizer registry size, by independent walk.
    pub trainable_params: usize,
    /// Score and update state across sparse layers, accumulators included.
    pub score_params: usize,
    /// What a dense movement-pruning run would train instead.
    pub movement_params: usize,
    pub wall_clock_secs: f64,
}

/// Per-step structured-accumulator increments, kept when
/// `log_structured_deltas` is set.
#[derive(Debug, Clone)]
pub struct DeltaRecord {
    pub step: usize,
    pub layer: String,
    pub d_r: Vec<f64>,
    pub d_c: Vec<f64>,
}

pub struct Trainer {
    model: Model,
    optimizer: AdamW,
    schedule: SparsitySchedule,
    options: TrainOptions,
    step: usize,
    losses: Vec<f64>,
    sparsities: Vec<f64>,
    deltas: Vec<DeltaRecord>,
    started: Instant,
    prior_secs: f64,
}

impl Trainer {
    pub fn new(model: Model, options: TrainOptions) -> Result<Self> {
        let schedule = SparsitySchedule::new(
            options.target_p,
            options.total_steps,
            options.warmup_frac,
            options.cooldown_frac,
        )?;
        if options.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        let optimizer = AdamW::new(&model, &options);
        Ok(Trainer {
            model,
            optimizer,
            schedule,
            options,
            step: 0,
            losses: Vec::new(),
            sparsities: Vec::new(),
            deltas: Vec::new(),
            started: Instant::now(),
            prior_secs: 0.0,
        })
    }

    /// Rebuild a mid-run trainer from checkpointed state. A mid-run
    /// resume needs no masks (the next step recomputes them); a resume
    /// of a finished run re-selects them at the final step's sparsity,
    /// exactly as the original run's post-training refresh did.
    pub fn resume(
        model: Model,
        options: TrainOptions,
        step: usize,
        losses: Vec<f64>,
        sparsities: Vec<f64>,
        adam_t: usize,
        moments: Vec<(String, Tensor2D, Tensor2D)>,
        prior_secs: f64,
    ) -> Result<Self> {
        if losses.len() != step || sparsities.len() != step {
            return Err(Error::checkpoint(format!(
                "trajectories hold {} and {} entries but step is {step}",
                losses.len(),
                sparsities.len()
            )));
        }
        if step > options.total_steps {
            return Err(Error::checkpoint(format!(
                "checkpoint step {step} exceeds total_steps {}",
                options.total_steps
            )));
        }
        let mut trainer = Trainer::new(model, options)?;
        trainer.optimizer.restore(adam_t, moments)?;
        trainer.step = step;
        trainer.losses = losses;
        trainer.sparsities = sparsities;
        trainer.prior_secs = prior_secs;
        if trainer.is_done() {
            let final_sparsity = trainer.schedule.sparsity_at(step - 1)?;
            for layer in trainer.model.sparse_layers_mut() {
                layer.set_mask_sparsity(final_sparsity)?;
            }
        }
        Ok(trainer)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn options(&self) -> &TrainOptions {
        &self.options
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn sparsities(&self) -> &[f64] {
        &self.sparsities
    }

    pub fn deltas(&self) -> &[DeltaRecord] {
        &self.deltas
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.options.total_steps
    }

    fn steps_per_epoch(&self, task: &SyntheticTask) -> usize {
        let examples = task.train_examples();
        examples.div_ceil(self.options.batch_size)
    }

    /// The example indices step t visits. Epoch order is shuffled by a
    /// stream keyed on the epoch number alone, so any step can be
    /// replayed without history.
    fn batch_indices(&self, task: &SyntheticTask, t: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(task);
        let epoch = t / spe;
        let slot = t % spe;
        let examples = task.train_examples();
        let mut order: Vec<usize> = (0..examples).collect();
        let mut rng = component_rng(self.options.seed, &format!("batch.epoch{epoch}"));
        order.shuffle(&mut rng);
        let start = slot * self.options.batch_size;
        let end = (start + self.options.batch_size).min(examples);
        order[start..end].to_vec()
    }

    /// One full training step; returns the batch loss.
    pub fn train_step(&mut self, task: &SyntheticTask) -> Result<f64> {
        if self.is_done() {
            return Err(Error::contract("run already finished"));
        }
        let t = self.step;
        let sparsity = self.schedule.sparsity_at(t)?;

        let indices = self.batch_indices(task, t);
        let (x, y) = task.train_batch(&indices)?;

        let mut tape = Tape::new();
        let fwd = self.model.forward_train(&mut tape, &x, sparsity)?;
        let loss_id = match &y {
            Targets::Values(target) => {
                let tid = tape.constant(target.clone());
                tape.mse(fwd.output, tid)?
            }
            Targets::Labels(labels) => tape.cross_entropy(fwd.output, labels)?,
        };
        let loss = tape.value(loss_id).get(0, 0);
        if !loss.is_finite() {
            let layer = self
                .model
                .sparse_layers()
                .iter()
                .zip(fwd.layers.iter())
                .find(|(_, f)| !tape.value(f.output).is_finite())
                .map(|(l, _)| l.name().to_string())
                .unwrap_or_else(|| "loss".to_string());
            return Err(Error::NonFinite { step: t, layer });
        }

        let grads = tape.backward(loss_id)?;

        // Movement accumulation sees raw gradients and effective weights.
        let log_deltas = self.options.log_structured_deltas;
        let mut step_deltas = Vec::new();
        for (layer, lf) in self.model.sparse_layers_mut().into_iter().zip(fwd.layers.iter()) {
            let grad_w = grads
                .get(lf.masked_weight)
                .ok_or_else(|| Error::contract("masked weight missing from gradient set"))?;
            let w_eff = tape.value(lf.effective_weight);
            if let Some((d_r, d_c)) = layer.accumulate(grad_w, w_eff)? {
                if log_deltas {
                    step_deltas.push(DeltaRecord {
                        step: t,
                        layer: layer.name().to_string(),
                        d_r: d_r.data().to_vec(),
                        d_c: d_c.data().to_vec(),
                    });
                }
            }
        }
        self.deltas.extend(step_deltas);

        // Leaf gradients in registry order; a leaf the loss never saw
        // contributes zero.
        let mut leaf_grads = Vec::with_capacity(fwd.params.len());
        for (_, id) in &fwd.params {
            let shape = tape.value(*id).shape();
            let g = match grads.get(*id) {
                Some(g) => g.clone(),
                None => Tensor2D::zeros(shape.0, shape.1),
            };
            leaf_grads.push(g);
        }
        let lr_now = crate::schedule::lr_at(self.options.lr, t, self.options.total_steps);
        self.optimizer.step(self.model.params_mut(), &leaf_grads, lr_now)?;

        self.losses.push(loss);
        self.sparsities.push(sparsity);
        self.step += 1;

        // Masks were selected from pre-update scores; once the run ends,
        // re-select them so reports and evaluation see current state.
        if self.is_done() {
            for layer in self.model.sparse_layers_mut() {
                layer.refresh_mask()?;
            }
        }
        Ok(loss)
    }

    /// Run to completion.
    pub fn run(&mut self, task: &SyntheticTask) -> Result<()> {
        while !self.is_done() {
            self.train_step(task)?;
        }
        Ok(())
    }

    pub fn wall_clock_secs(&self) -> f64 {
        self.prior_secs + self.started.elapsed().as_secs_f64()
    }

    /// Assemble the report; requires a finished run.
    pub fn report(&self, task: &SyntheticTask) -> Result<RunReport> {
        if !self.is_done() {
            return Err(Error::contract(format!(
                "report requested at step {} of {}",
                self.step, self.options.total_steps
            )));
        }
        let final_metric = evaluate(&self.model, task)?;
        let metric_name = if task.is_classification() { "accuracy" } else { "mse" };

        let mut masks = Vec::new();
        for layer in self.model.sparse_layers() {
            let mask = layer
                .current_mask()
                .ok_or_else(|| Error::contract("finished run has no mask"))?;
            masks.push(MaskRecord {
                layer: layer.name().to_string(),
                role: layer.role().label().to_string(),
                depth: layer.depth(),
                rows: mask.rows(),
                cols: mask.cols(),
                bits: mask.to_bit_string(),
            });
        }

        let trainable_params: usize =
            self.model.params().iter().map(|p| p.value.len()).sum();
        let mut score_params = 0;
        let mut movement_params = 0;
        for layer in self.model.sparse_layers() {
            let (n, k) = layer.shape();
            score_params += layer.score_param_count();
            movement_params += crate::importance::movement_param_count(n, k);
        }

        let criterion = self
            .model
            .sparse_layers()
            .first()
            .map(|l| l.criterion().label())
            .unwrap_or_else(|| "none".to_string());

        Ok(RunReport {
            criterion,
            seed: self.options.seed,
            loss_trajectory: self.losses.clone(),
            sparsity_trajectory: self.sparsities.clone(),
            final_metric,
            metric_name: metric_name.to_string(),
            masks,
            trainable_params,
            score_params,
            movement_params,
            wall_clock_secs: self.wall_clock_secs(),
        })
    }
}

/// Mean loss metric over the test split with masks frozen: MSE for
/// regression, accuracy for classification. Batches weigh in by size.
pub fn evaluate(model: &Model, task: &SyntheticTask) -> Result<f64> {
    let examples = task.test_examples();
    if examples == 0 {
        return Err(Error::contract("cannot evaluate on an empty test split"));
    }
    let mut weighted = 0.0;
    let mut start = 0;
    while start < examples {
        let len = EVAL_BATCH.min(examples - start);
        let indices: Vec<usize> = (start..start + len).collect();
        let (x, y) = task.test_batch(&indices)?;
        let pred = model.forward_eval(&x)?;
        let batch_metric = match &y {
            Targets::Values(target) => {
                if pred.shape() != target.shape() {
                    return Err(Error::shape("evaluate", pred.shape(), target.shape()));
                }
                let diff = pred.sub(target)?;
                diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
            }
            Targets::Labels(labels) => {
                let mut correct = 0usize;
                for (e, &label) in labels.iter().enumerate() {
                    let mut best = 0;
                    for r in 1..pred.rows() {
                        if pred.get(r, e) > pred.get(best, e) {
                            best = r;
                        }
                    }
                    if best == label {
                        correct += 1;
                    }
                }
                correct as f64 / labels.len() as f64
            }
        };
        weighted += batch_metric * len as f64;
        start += len;
    }
    Ok(weighted / examples as f64)
}

/// Convenience wrapper: fresh trainer, full run, report.
pub fn train(
    model: Model,
    task: &SyntheticTask,
    options: TrainOptions,
) -> Result<(Model, RunReport)> {
    let mut trainer = Trainer::new(model, options)?;
    trainer.run(task)?;
    let report = trainer.report(task)?;
    Ok((trainer.model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_planted_teacher;
    use crate::importance::{ScoreConfig, ScoreVariant};
    use crate::layer::Criterion;
    use crate::model::MlpModel;

    fn mlp(criterion: Criterion, seed: u64) -> Model {
        Model::Mlp(
            MlpModel::new(
                &[8, 8],
                None,
                criterion,
                ScoreConfig { r1: 2, r2: 2, ..Default::default() },
                false,
                seed,
            )
            .unwrap(),
        )
    }

    fn quick_options(steps: usize, seed: u64) -> TrainOptions {
        TrainOptions {
            total_steps: steps,
            batch_size: 16,
            lr: 1e-2,
            seed,
            target_p: 0.8,
            ..Default::default()
        }
    }

    #[test]
    fn loss_decreases_on_planted_task() {
        let task = gen_planted_teacher(8, 8, 200, 0.5, 0.0, 1).unwrap();
        let model = mlp(Criterion::Pst(ScoreVariant::FULL), 1);
        let (_, report) = train(model, &task, quick_options(150, 1)).unwrap();
        let head: f64 = report.loss_trajectory[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = report.loss_trajectory[140..].iter().sum::<f64>() / 10.0;
        assert!(tail < head * 0.8, "loss failed to improve: {head} -> {tail}");
        assert_eq!(report.loss_trajectory.len(), 150);
        assert_eq!(report.sparsity_trajectory.len(), 150);
        assert_eq!(report.metric_name, "mse");
    }

    #[test]
    fn runs_are_bit_deterministic() {
        let task = gen_planted_teacher(8, 8, 100, 0.5, 0.1, 2).unwrap();
        let run = || {
            let model = mlp(Criterion::Pst(ScoreVariant::FULL), 2);
            train(model, &task, quick_options(40, 2)).unwrap().1
        };
        let a = run();
        let b = run();
        assert_eq!(a.loss_trajectory, b.loss_trajectory);
        assert_eq!(a.sparsity_trajectory, b.sparsity_trajectory);
        assert_eq!(a.final_metric.to_bits(), b.final_metric.to_bits());
        for (ma, mb) in a.masks.iter().zip(b.masks.iter()) {
            assert_eq!(ma.bits, mb.bits);
        }
    }

    #[test]
    fn base_weights_never_move() {
        let task = gen_planted_teacher(8, 8, 100, 0.5, 0.0, 3).unwrap();
        let model = mlp(Criterion::Pst(ScoreVariant::FULL), 3);
        let before: Vec<Vec<u64>> = model
            .sparse_layers()
            .iter()
            .map(|l| l.state().unwrap().w0().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let (model, _) = train(model, &task, quick_options(60, 3)).unwrap();
        let after: Vec<Vec<u64>> = model
            .sparse_layers()
            .iter()
            .map(|l| l.state().unwrap().w0().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn optimizer_registry_excludes_frozen_state() {
        let model = mlp(Criterion::Pst(ScoreVariant::FULL), 4);
        let optimizer = AdamW::new(&model, &TrainOptions::default());
        for name in optimizer.names() {
            assert!(
                !name.ends_with(".w0") && !name.ends_with(".r") && !name.ends_with(".c"),
                "{name} must not be optimized"
            );
        }
        // u, v, a, b, bias for the single layer.
        assert_eq!(optimizer.names().len(), 5);
    }

    #[test]
    fn accumulator_replay_matches_final_state() {
        let task = gen_planted_teacher(8, 8, 100, 0.5, 0.0, 5).unwrap();
        let model = mlp(Criterion::Pst(ScoreVariant::FULL), 5);
        let mut options = quick_options(30, 5);
        options.log_structured_deltas = true;
        let mut trainer = Trainer::new(model, options).unwrap();
        trainer.run(&task).unwrap();

        let layer = &trainer.model().sparse_layers()[0];
        let (n, k) = layer.shape();
        let mut r = Tensor2D::zeros(n, 1);
        let mut c = Tensor2D::zeros(1, k);
        for rec in trainer.deltas() {
            assert_eq!(rec.layer, layer.name());
            r = r.add(&Tensor2D::new(n, 1, rec.d_r.clone()).unwrap()).unwrap();
            c = c.add(&Tensor2D::new(1, k, rec.d_c.clone()).unwrap()).unwrap();
        }
        let state = layer.state().unwrap();
        assert_eq!(state.r, r);
        assert_eq!(state.c, c);
        assert_eq!(trainer.deltas().len(), 30);
    }

    #[test]
    fn zero_sparsity_trajectories_agree_across_criteria() {
        let task = gen_planted_teacher(8, 8, 100, 0.5, 0.0, 6).unwrap();
        let mut options = quick_options(25, 6);
        options.target_p = 0.0;
        let (_, map) = train(mlp(Criterion::Map, 6), &task, options.clone()).unwrap();
        let (_, random) = train(mlp(Criterion::Random, 6), &task, options).unwrap();
        // With every mask all-ones the criteria cannot diverge.
        assert_eq!(map.loss_trajectory, random.loss_trajectory);
        assert_eq!(map.final_metric.to_bits(), random.final_metric.to_bits());
    }

    #[test]
    fn evaluation_is_pure_and_weighted() {
        let task = gen_planted_teacher(8, 8, 2000, 0.5, 0.2, 7).unwrap();
        let model = mlp(Criterion::Map, 7);
        let mut trainer = Trainer::new(model, quick_options(5, 7)).unwrap();
        trainer.run(&task).unwrap();

        let m1 = evaluate(trainer.model(), &task).unwrap();
        let m2 = evaluate(trainer.model(), &task).unwrap();
        assert_eq!(m1.to_bits(), m2.to_bits());

        // Weighted recombination over hand-chosen batch splits.
        let examples = task.test_examples();
        let mut weighted = 0.0;
        let mut covered = 0;
        let mut sizes = Vec::new();
        let mut remaining = examples;
        let mut chunk = 133;
        while remaining > 0 {
            let len = chunk.min(remaining);
            sizes.push(len);
            remaining -= len;
            chunk += 57;
        }
        for &len in &sizes {
            let indices: Vec<usize> = (covered..covered + len).collect();
            let (x, y) = task.test_batch(&indices).unwrap();
            let pred = trainer.model().forward_eval(&x).unwrap();
            if let Targets::Values(target) = &y {
                let diff = pred.sub(target).unwrap();
                let mse = diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
                weighted += mse * len as f64;
            }
            covered += len;
        }
        let recombined = weighted / examples as f64;
        assert!((recombined - m1).abs() < 1e-12);
    }

    #[test]
    fn sparsity_trajectory_follows_schedule() {
        let task = gen_planted_teacher(8, 8, 50, 0.5, 0.0, 8).unwrap();
        let options = TrainOptions {
            total_steps: 100,
            batch_size: 8,
            target_p: 0.9,
            warmup_frac: 0.1,
            cooldown_frac: 0.3,
            seed: 8,
            ..Default::default()
        };
        let (_, report) = train(mlp(Criterion::Map, 8), &task, options).unwrap();
        assert_eq!(report.sparsity_trajectory[0], 0.0);
        assert_eq!(report.sparsity_trajectory[10], 0.0);
        assert!((report.sparsity_trajectory[40] - 0.7875).abs() < 1e-12);
        assert_eq!(report.sparsity_trajectory[70], 0.9);
        assert_eq!(report.sparsity_trajectory[99], 0.9);
    }

    #[test]
    fn nonfinite_loss_aborts_with_step_and_layer() {
        let task = gen_planted_teacher(8, 8, 50, 0.5, 0.0, 9).unwrap();
        let model = mlp(Criterion::Map, 9);
        let mut options = quick_options(20, 9);
        options.lr = 1e18;
        let mut trainer = Trainer::new(model, options).unwrap();
        let err = trainer.run(&task).unwrap_err();
        match err {
            Error::NonFinite { step, .. } => assert!(step > 0),
            other => panic!("expected non-finite abort, got {other}"),
        }
    }

    #[test]
    fn report_before_finish_is_rejected() {
        let task = gen_planted_teacher(8, 8, 50, 0.5, 0.0, 10).unwrap();
        let trainer = Trainer::new(mlp(Criterion::Map, 10), quick_options(10, 10)).unwrap();
        assert!(trainer.report(&task).is_err());
    }

    #[test]
    fn resume_replays_identically() {
        let task = gen_planted_teacher(8, 8, 100, 0.5, 0.1, 11).unwrap();
        let options = quick_options(40, 11);

        let (_, full) = train(
            mlp(Criterion::Pst(ScoreVariant::FULL), 11),
            &task,
            options.clone(),
        )
        .unwrap();

        // Stop at 23, rebuild from captured state, finish.
        let mut first = Trainer::new(mlp(Criterion::Pst(ScoreVariant::FULL), 11), options.clone())
            .unwrap();
        for _ in 0..23 {
            first.train_step(&task).unwrap();
        }
        let mut resumed_model = mlp(Criterion::Pst(ScoreVariant::FULL), 11);
        for entry in first.model().params() {
            resumed_model.set_param(&entry.name, entry.value.clone()).unwrap();
        }
        for (name, tensor) in first.model().aux_tensors() {
            resumed_model.set_aux(&name, tensor.clone()).unwrap();
        }
        let moments: Vec<(String, Tensor2D, Tensor2D)> = first
            .optimizer()
            .moments()
            .map(|(n, m, v)| (n.to_string(), m.clone(), v.clone()))
            .collect();
        let mut second = Trainer::resume(
            resumed_model,
            options,
            first.step_count(),
            first.losses().to_vec(),
            first.sparsities().to_vec(),
            first.optimizer().t(),
            moments,
            0.0,
        )
        .unwrap();
        second.run(&task).unwrap();
        let resumed = second.report(&task).unwrap();

        assert_eq!(full.loss_trajectory, resumed.loss_trajectory);
        assert_eq!(full.final_metric.to_bits(), resumed.final_metric.to_bits());
        for (a, b) in full.masks.iter().zip(resumed.masks.iter()) {
            assert_eq!(a.bits, b.bits);
        }
    }

    #[test]
    fn report_counts_score_and_registry_params() {
        let task = gen_planted_teacher(8, 8, 50, 0.5, 0.0, 12).unwrap();
        let (_, report) = train(
            mlp(Criterion::Pst(ScoreVariant::FULL), 12),
            &task,
            quick_options(5, 12),
        )
        .unwrap();
        // One 8x8 layer at r1=r2=2: (8+8)(2+2+1) = 80 score/update params.
        assert_eq!(report.score_params, 80);
        // Registry: u 16 + v 16 + a 16 + b 16 + bias 8.
        assert_eq!(report.trainable_params, 72);
        assert_eq!(report.movement_params, 128);
    }
}
