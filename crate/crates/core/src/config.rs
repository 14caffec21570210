//! Serializable hyperparameters. Every field has a default so partial JSON
//! files are accepted; unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed coefficients of the detection and denoising loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub dn_cls: f64,
    pub dn_l1: f64,
    pub dn_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
            dn_cls: 1.0,
            dn_l1: 5.0,
            dn_giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            cls: 0.0,
            l1: 0.0,
            giou: 0.0,
            dn_cls: 0.0,
            dn_l1: 0.0,
            dn_giou: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let named = [
            ("loss.cls", self.cls),
            ("loss.l1", self.l1),
            ("loss.giou", self.giou),
            ("loss.dn_cls", self.dn_cls),
            ("loss.dn_l1", self.dn_l1),
            ("loss.dn_giou", self.dn_giou),
        ];
        for (field, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Denoising-query settings used during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnConfig {
    pub groups: usize,
    /// Fractional jitter of box centers and sizes, in `[0, 1)`.
    pub box_noise: f64,
    /// Probability of replacing a label with a different one.
    pub label_flip: f64,
}

impl Default for DnConfig {
    fn default() -> Self {
        Self {
            groups: 3,
            box_noise: 0.4,
            label_flip: 0.25,
        }
    }
}

impl DnConfig {
    pub fn disabled() -> Self {
        Self {
            groups: 0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.box_noise) {
            return Err(Error::config("dn.box_noise", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.label_flip) {
            return Err(Error::config("dn.label_flip", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Steps between metric log lines.
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            grad_clip: 0.0,
            log_every: 10,
        }
    }
}

/// All dimensional hyperparameters of the detector plus its training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Visual width `d` shared by the pyramid, encoder and decoder.
    pub d_model: usize,
    pub d_text: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    /// Sampling points per scale in deformable attention.
    pub points: usize,
    pub ffn_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// The first `frozen_text_layers` text layers (and the token tables when > 0) are not trained.
    pub frozen_text_layers: usize,
    pub max_text_len: usize,
    pub score_threshold: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub dn: DnConfig,
    pub train: TrainSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_text: 64,
            heads: 8,
            decoder_layers: 4,
            num_queries: 64,
            points: 4,
            ffn_dim: 128,
            text_layers: 2,
            text_heads: 4,
            frozen_text_layers: 0,
            max_text_len: 64,
            score_threshold: 0.05,
            seed: 0,
            loss: LossWeights::default(),
            dn: DnConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

impl ModelConfig {
    /// Very small dimensions for gradient checks and fast unit tests.
    pub fn micro() -> Self {
        Self {
            d_model: 8,
            d_text: 8,
            heads: 2,
            decoder_layers: 2,
            num_queries: 6,
            points: 2,
            ffn_dim: 8,
            text_layers: 1,
            text_heads: 2,
            max_text_len: 16,
            ..Self::default()
        }
    }

    /// The default dimensions with the optimizer settings used for
    /// overfitting synthetic scenes.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.train.learning_rate = 1e-3;
        cfg.train.grad_clip = 0.1;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_text", self.d_text),
            ("heads", self.heads),
            ("decoder_layers", self.decoder_layers),
            ("num_queries", self.num_queries),
            ("points", self.points),
            ("ffn_dim", self.ffn_dim),
            ("text_heads", self.text_heads),
            ("train.batch_size", self.train.batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::config("d_model", "must be a multiple of 4 for 2-D positional encodings"));
        }
        if self.d_text % self.text_heads != 0 {
            return Err(Error::config(
                "text_heads",
                format!("d_text {} is not divisible by {} heads", self.d_text, self.text_heads),
            ));
        }
        if self.frozen_text_layers > self.text_layers {
            return Err(Error::config("frozen_text_layers", "exceeds text_layers"));
        }
        if self.max_text_len < 2 {
            return Err(Error::config("max_text_len", "must leave room for [cls] and one byte"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::config("score_threshold", "must lie in [0, 1]"));
        }
        if !(self.train.learning_rate >= 0.0) {
            return Err(Error::config("train.learning_rate", "must be >= 0"));
        }
        self.loss.validate()?;
        self.dn.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
