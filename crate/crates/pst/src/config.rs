//! Flat TOML run configuration.
//!
//! Every key sits at the top level with a prefix naming its area, so a
//! config file stays grep-able and hand-editable. Unknown keys are
//! rejected outright; missing keys fall back to the defaults below.
//! `resolved_toml` prints the fully expanded form, and every run writes
//! that copy next to its outputs so the run can be reproduced from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{gen_planted_teacher, gen_rank_shift, gen_seq_classify, SyntheticTask};
use crate::error::{Error, Result};
use crate::importance::ScoreConfig;
use crate::layer::Criterion;
use crate::model::{MlpModel, Model, TinyTransformer};
use crate::trainer::TrainOptions;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // Task.
    #[serde(default = "d_task")]
    pub task: String,
    #[serde(default = "d_task_n")]
    pub task_n: usize,
    #[serde(default = "d_task_k")]
    pub task_k: usize,
    #[serde(default = "d_task_samples")]
    pub task_samples: usize,
    #[serde(default = "d_task_sparsity")]
    pub task_sparsity: f64,
    #[serde(default = "d_task_noise")]
    pub task_noise: f64,
    #[serde(default = "d_task_shift")]
    pub task_shift: f64,
    #[serde(default = "d_task_d")]
    pub task_d: usize,
    #[serde(default = "d_task_seq_len")]
    pub task_seq_len: usize,
    #[serde(default = "d_task_classes")]
    pub task_classes: usize,

    // Model.
    #[serde(default = "d_model")]
    pub model: String,
    #[serde(default = "d_model_dims")]
    pub model_dims: Vec<usize>,

    // Criterion and score decomposition.
    #[serde(default = "d_criterion")]
    pub criterion: String,
    #[serde(default = "d_r")]
    pub r1: usize,
    #[serde(default = "d_r")]
    pub r2: usize,
    #[serde(default = "d_one")]
    pub alpha1: f64,
    #[serde(default = "d_one")]
    pub alpha2: f64,
    #[serde(default = "d_one")]
    pub beta: f64,
    #[serde(default = "d_one")]
    pub legacy_alpha: f64,
    #[serde(default)]
    pub freeze_weights: bool,

    // Schedule and optimization.
    #[serde(default = "d_target_p")]
    pub target_p: f64,
    #[serde(default = "d_total_steps")]
    pub total_steps: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "d_cooldown_frac")]
    pub cooldown_frac: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "d_one")]
    pub score_lr_scale: f64,

    // Run plumbing.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub log_structured_deltas: bool,
    /// Checkpoint cadence in steps; 0 saves only the final state.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "d_output_dir")]
    pub output_dir: String,
}

fn d_task() -> String {
    "planted".to_string()
}
fn d_task_n() -> usize {
    64
}
fn d_task_k() -> usize {
    64
}
fn d_task_samples() -> usize {
    2000
}
fn d_task_sparsity() -> f64 {
    0.9
}
fn d_task_noise() -> f64 {
    0.01
}
fn d_task_shift() -> f64 {
    0.1
}
fn d_task_d() -> usize {
    16
}
fn d_task_seq_len() -> usize {
    8
}
fn d_task_classes() -> usize {
    4
}
fn d_model() -> String {
    "mlp".to_string()
}
fn d_model_dims() -> Vec<usize> {
    vec![64, 64]
}
fn d_criterion() -> String {
    "pst".to_string()
}
fn d_r() -> usize {
    8
}
fn d_one() -> f64 {
    1.0
}
fn d_target_p() -> f64 {
    0.9
}
fn d_total_steps() -> usize {
    500
}
fn d_batch_size() -> usize {
    32
}
fn d_lr() -> f64 {
    2e-3
}
fn d_warmup_frac() -> f64 {
    0.1
}
fn d_cooldown_frac() -> f64 {
    0.3
}
fn d_weight_decay() -> f64 {
    0.01
}
fn d_clip_norm() -> f64 {
    1.0
}
fn d_output_dir() -> String {
    "runs/out".to_string()
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is all defaults")
    }
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.criterion()?;
        if !matches!(self.task.as_str(), "planted" | "rank_shift" | "seq") {
            return Err(Error::config(format!(
                "task must be planted, rank_shift, or seq, not {:?}",
                self.task
            )));
        }
        if !matches!(self.model.as_str(), "mlp" | "transformer") {
            return Err(Error::config(format!(
                "model must be mlp or transformer, not {:?}",
                self.model
            )));
        }
        match (self.task.as_str(), self.model.as_str()) {
            ("seq", "transformer") | ("planted", "mlp") | ("rank_shift", "mlp") => {}
            (task, model) => {
                return Err(Error::config(format!(
                    "model {model:?} does not fit task {task:?}: regression tasks take the \
                     mlp, the seq task takes the transformer"
                )));
            }
        }
        if self.model == "mlp" {
            if self.model_dims.len() < 2 || self.model_dims.iter().any(|&d| d == 0) {
                return Err(Error::config(
                    "model_dims needs at least two positive entries".to_string(),
                ));
            }
            if self.model_dims[0] != self.task_k {
                return Err(Error::config(format!(
                    "model_dims starts at {} but the task feeds {} features",
                    self.model_dims[0], self.task_k
                )));
            }
            if *self.model_dims.last().unwrap() != self.task_n {
                return Err(Error::config(format!(
                    "model_dims ends at {} but the task wants {} outputs",
                    self.model_dims.last().unwrap(),
                    self.task_n
                )));
            }
        }
        if self.model == "transformer" && self.task_d < 4 {
            return Err(Error::config("task_d must be at least 4".to_string()));
        }
        if self.r1 == 0 || self.r2 == 0 {
            return Err(Error::config("r1 and r2 must be at least 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.target_p) {
            return Err(Error::config("target_p must lie in [0, 1]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.task_sparsity) {
            return Err(Error::config("task_sparsity must lie in [0, 1]".to_string()));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1".to_string()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive and finite".to_string()));
        }
        if self.warmup_frac < 0.0
            || self.cooldown_frac < 0.0
            || self.warmup_frac + self.cooldown_frac >= 1.0
        {
            return Err(Error::config(
                "warmup_frac and cooldown_frac must be non-negative and sum below 1".to_string(),
            ));
        }
        if self.task_samples < 5 {
            return Err(Error::config("task_samples must be at least 5".to_string()));
        }
        if self.task_seq_len == 0 {
            return Err(Error::config("task_seq_len must be at least 1".to_string()));
        }
        if self.task == "seq" && self.task_classes < 2 {
            return Err(Error::config("task_classes must be at least 2".to_string()));
        }
        if self.task_n == 0 || self.task_k == 0 {
            return Err(Error::config("task_n and task_k must be positive".to_string()));
        }
        Ok(())
    }

    pub fn criterion(&self) -> Result<Criterion> {
        Criterion::parse(&self.criterion).map_err(|e| Error::config(e.to_string()))
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            beta: self.beta,
            r1: self.r1,
            r2: self.r2,
            legacy_alpha: self.legacy_alpha,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            target_p: self.target_p,
            warmup_frac: self.warmup_frac,
            cooldown_frac: self.cooldown_frac,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            score_lr_scale: self.score_lr_scale,
            log_structured_deltas: self.log_structured_deltas,
        }
    }

    pub fn build_task(&self) -> Result<SyntheticTask> {
        match self.task.as_str() {
            "planted" => gen_planted_teacher(
                self.task_n,
                self.task_k,
                self.task_samples,
                self.task_sparsity,
                self.task_noise,
                self.seed,
            ),
            "rank_shift" => gen_rank_shift(
                self.task_n,
                self.task_k,
                self.task_samples,
                self.task_sparsity,
                self.task_noise,
                self.task_shift,
                self.seed,
            ),
            "seq" => gen_seq_classify(
                self.task_d,
                self.task_seq_len,
                self.task_classes,
                self.task_samples,
                self.task_noise,
                self.seed,
            ),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        let criterion = self.criterion()?;
        match self.model.as_str() {
            "mlp" => Ok(Model::Mlp(MlpModel::new(
                &self.model_dims,
                None,
                criterion,
                self.score_config(),
                self.freeze_weights,
                self.seed,
            )?)),
            "transformer" => Ok(Model::Transformer(TinyTransformer::new(
                self.task_d,
                self.task_seq_len,
                self.task_classes,
                criterion,
                self.score_config(),
                self.freeze_weights,
                self.seed,
            )?)),
            other => Err(Error::config(format!("unknown model {other:?}"))),
        }
    }

    /// Every field spelled out, defaults included.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Two configs describe the same run if they agree everywhere except
    /// the output location.
    pub fn same_run(&self, other: &RunConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.output_dir = String::new();
        b.output_dir = String::new();
        a == b
    }
}
