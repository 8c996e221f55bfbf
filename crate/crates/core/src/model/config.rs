use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and regularization settings of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ff_dim: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub label_smoothing: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a vocabulary of the given size.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 256,
            ff_dim: 512,
            num_heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            dropout: 0.1,
            max_positions: 128,
            vocab_size,
            label_smoothing: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("ff_dim", self.ff_dim),
            ("num_heads", self.num_heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_model ({}) must be divisible by num_heads ({})",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Upper bound on source plus target tokens per batch.
    pub max_tokens_per_batch: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    /// Linear warmup length; the rate then decays with the inverse square
    /// root of the step. Zero means a constant rate.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_tokens_per_batch: 4096,
            epochs: 20,
            peak_lr: 5e-4,
            warmup_steps: 4000,
            clip_norm: 1.0,
            rng_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens_per_batch == 0 {
            return Err(Error::config("max_tokens_per_batch must be positive"));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr must be a finite non-negative number"));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::config("clip_norm must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate at 1-based optimizer step `step`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.peak_lr;
        }
        let warm = self.warmup_steps as f64;
        self.peak_lr * (step / warm).min((warm / step).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let tc = TrainConfig {
            warmup_steps: 100,
            peak_lr: 1e-3,
            ..TrainConfig::default()
        };
        assert!((tc.learning_rate(50) - 5e-4).abs() < 1e-15);
        assert!((tc.learning_rate(100) - 1e-3).abs() < 1e-15);
        assert!((tc.learning_rate(400) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(100);
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 4;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
