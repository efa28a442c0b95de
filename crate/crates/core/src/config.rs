//! Hyperparameters for the model and both training stages.

use alloc::format;

use crate::{Error, Result};

/// Architecture sizes shared by every stage.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    /// Width of each embedding half; the concatenated space is `2 * d`.
    pub d: usize,
    /// Number of purchase-intention vectors.
    pub k_intents: usize,
    /// Hashing vocabulary size of the text encoders.
    pub vocab_size: usize,
    /// Width of token embeddings and of encoded image patches.
    pub token_dim: usize,
    /// Raw features per image patch (mean intensity, mean gradient, histogram bins).
    pub image_raw_dim: usize,
    /// Projector dropout rate.
    pub dropout: f64,
    /// Hidden width multiplier of the decoder feed-forward block.
    pub decoder_ff_mult: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Maximum number of retrieved-feature positions fed to the decoder.
    pub max_feature_slots: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            k_intents: 64,
            vocab_size: 32768,
            token_dim: 128,
            image_raw_dim: 10,
            dropout: 0.10,
            decoder_ff_mult: 2,
            decoder_layers: 1,
            decoder_heads: 1,
            max_feature_slots: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn concat_dim(&self) -> usize {
        2 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if self.k_intents < 2 {
            return Err(Error::Config(format!(
                "k_intents must be at least 2, got {}",
                self.k_intents
            )));
        }
        if self.vocab_size == 0 || self.token_dim == 0 || self.image_raw_dim == 0 {
            return Err(Error::Config(
                "vocab_size, token_dim and image_raw_dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.decoder_ff_mult == 0 || self.max_feature_slots == 0 || self.decoder_layers == 0 {
            return Err(Error::Config(
                "decoder_ff_mult, decoder_layers and max_feature_slots must be positive".into(),
            ));
        }
        if self.decoder_heads == 0 || self.concat_dim() % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "decoder_heads must divide 2d = {}, got {}",
                self.concat_dim(),
                self.decoder_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stage1Config {
    /// Weight of the concatenated-space contrastive term.
    pub lambda: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the competitive-learning term in the combined loss.
    pub rcl_weight: f64,
    /// Use the verbatim `r * rp` coefficient (attracts on mismatch too).
    pub rcl_literal: bool,
    /// Average query→product and product→query contrastive directions.
    pub symmetric_contrastive: bool,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperature: 0.07,
            batch_size: 32,
            epochs: 15,
            lr: 1e-3,
            weight_decay: 1e-4,
            rcl_weight: 1.0,
            rcl_literal: false,
            symmetric_contrastive: false,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.rcl_weight < 0.0 {
            return Err(Error::Config(
                "lr must be positive; weight_decay and rcl_weight non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Form of the pairwise preference loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PmlForm {
    /// `-log σ(ŷ·target - ŷ·negative)`.
    #[default]
    Sigmoid,
    /// `-log exp(ŷ·target - ŷ·negative)`, i.e. the plain score difference.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Negatives drawn per target.
    pub negatives: usize,
    pub kl_weight: f64,
    pub pml_form: PmlForm,
    /// Retrieved features per modality per query token.
    pub top_m_features: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            negatives: 1,
            kl_weight: 1.0,
            pml_form: PmlForm::Sigmoid,
            top_m_features: 1,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.negatives < 1 {
            return Err(Error::Config("negatives must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.top_m_features < 1 {
            return Err(Error::Config("top_m_features must be at least 1".into()));
        }
        if !(self.lr > 0.0) || self.kl_weight < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr must be positive; kl_weight and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}
