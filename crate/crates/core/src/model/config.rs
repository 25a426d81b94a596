use crate::data::{WindowBatch, KNOWN_FEATURES};
use crate::error::{Error, Result};

/// Train mode enables dropout; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Network geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub past_len: usize,
    pub horizon: usize,
    pub static_features: usize,
    /// Observed dynamic features, not counting past targets.
    pub observed_features: usize,
    pub target_features: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 16,
            heads: 4,
            dropout: 0.2,
            past_len: 13,
            horizon: 15,
            static_features: 2,
            observed_features: 4,
            target_features: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Geometry matching the inputs of `batch`.
    pub fn for_batch(batch: &WindowBatch, d_model: usize, heads: usize, dropout: f64, seed: u64) -> Self {
        ModelConfig {
            d_model,
            heads,
            dropout,
            past_len: batch.past_len,
            horizon: batch.horizon,
            static_features: batch.static_features,
            observed_features: batch.past_features - batch.target_features - KNOWN_FEATURES.len(),
            target_features: batch.target_features,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.past_len == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument("past_len and horizon must be positive".into()));
        }
        if self.static_features == 0 {
            return Err(Error::InvalidArgument("at least one static feature is required".into()));
        }
        if self.target_features == 0 {
            return Err(Error::InvalidArgument("at least one target is required".into()));
        }
        Ok(())
    }

    /// Per-head query/key width.
    pub fn d_attn(&self) -> usize {
        self.d_model / self.heads
    }

    /// Shared value width.
    pub fn d_value(&self) -> usize {
        self.d_model
    }

    pub fn total_len(&self) -> usize {
        self.past_len + self.horizon
    }

    pub fn past_inputs(&self) -> usize {
        self.observed_features + self.target_features + KNOWN_FEATURES.len()
    }

    pub fn future_inputs(&self) -> usize {
        KNOWN_FEATURES.len()
    }

    pub fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        let ok = batch.past_len == self.past_len
            && batch.horizon == self.horizon
            && batch.past_features == self.past_inputs()
            && batch.future_features == self.future_inputs()
            && batch.static_features == self.static_features
            && batch.target_features == self.target_features;
        if !ok {
            return Err(Error::Shape(format!(
                "batch geometry (past {}×{}, future {}×{}, static {}, targets {}) does not match model config {:?}",
                batch.past_len,
                batch.past_features,
                batch.horizon,
                batch.future_features,
                batch.static_features,
                batch.target_features,
                self
            )));
        }
        if batch.is_empty() {
            return Err(Error::Empty("batch has no windows".into()));
        }
        Ok(())
    }
}
