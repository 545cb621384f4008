use serde::{Deserialize, Serialize};

use crate::clustering::CentroidInit;
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::softmax::SoftmaxMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Model dimension `d`.
    pub dim: usize,
    /// Raw item embedding dimension `k`.
    pub item_dim: usize,
    /// Encoder hidden width; 0 drops the encoder and uses the pooled input directly.
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap per step; 0 disables clipping.
    pub max_grad_norm: f64,
    pub max_steps: usize,
    pub id_only_fraction: f64,
    pub metadata_keep_prob: f64,
    pub seed: u64,
    pub softmax_mode: SoftmaxMode,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_every: usize,
    /// Validation rounds without improvement before stopping; 0 never stops early.
    pub patience: usize,
    /// Most recent history items kept per example.
    pub max_history: usize,
    pub vocab_size: usize,
    pub centroid_init: CentroidInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            item_dim: 512,
            hidden: 64,
            batch_size: 64,
            learning_rate: 1.0,
            weight_decay: 1e-5,
            max_grad_norm: 1.0,
            max_steps: 2000,
            id_only_fraction: 0.25,
            metadata_keep_prob: 0.5,
            seed: 0,
            softmax_mode: SoftmaxMode::TwoLevel,
            eval_every: 100,
            patience: 5,
            max_history: 20,
            vocab_size: 8192,
            centroid_init: CentroidInit::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.id_only_fraction) {
            return bad("id_only_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.metadata_keep_prob) {
            return bad("metadata_keep_prob must lie in [0, 1]");
        }
        if self.dim == 0 || self.item_dim == 0 {
            return bad("dim and item_dim must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_history == 0 {
            return bad("max_history must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad("max_grad_norm must be finite and non-negative");
        }
        Ok(())
    }

    /// Overrides fields from `kv`, consuming the keys it recognises.
    pub fn apply_kv(&mut self, kv: &mut KvConfig) -> Result<()> {
        kv.take_into("dim", &mut self.dim)?;
        kv.take_into("item_dim", &mut self.item_dim)?;
        kv.take_into("hidden", &mut self.hidden)?;
        kv.take_into("batch_size", &mut self.batch_size)?;
        kv.take_into("learning_rate", &mut self.learning_rate)?;
        kv.take_into("weight_decay", &mut self.weight_decay)?;
        kv.take_into("max_grad_norm", &mut self.max_grad_norm)?;
        kv.take_into("max_steps", &mut self.max_steps)?;
        kv.take_into("id_only_fraction", &mut self.id_only_fraction)?;
        kv.take_into("metadata_keep_prob", &mut self.metadata_keep_prob)?;
        kv.take_into("seed", &mut self.seed)?;
        kv.take_into("softmax_mode", &mut self.softmax_mode)?;
        kv.take_into("eval_every", &mut self.eval_every)?;
        kv.take_into("patience", &mut self.patience)?;
        kv.take_into("max_history", &mut self.max_history)?;
        kv.take_into("vocab_size", &mut self.vocab_size)?;
        if let Some(v) = kv.take::<String>("centroid_init")? {
            self.centroid_init = match v.as_str() {
                "mean" => CentroidInit::Mean,
                "random" => CentroidInit::Random,
                other => return Err(Error::Config(format!("unknown centroid_init `{other}`"))),
            };
        }
        Ok(())
    }

    /// Learning rate at `step` under cosine decay to zero at `max_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.max_steps == 0 {
            return self.learning_rate;
        }
        let t = (step as f64 / self.max_steps as f64).min(1.0);
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
