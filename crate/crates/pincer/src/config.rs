//! Run configuration: one TOML document holding every hyperparameter.

use std::path::{Path, PathBuf};

use pincer_core::config::{ModelConfig, PmlForm, Stage1Config, Stage2Config};
use pincer_core::datagen::{DatagenConfig, PiDirection, PiFunction, PiKind};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub d: usize,
    pub k_intents: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub pml_form: PmlForm,
    pub kl_weight: f64,
    pub n_probe: usize,
    pub top_m_features: usize,
    pub rcl_literal: bool,
    pub selectivity_quantile: f64,
    pub pi_kind: PiKind,
    pub pi_direction: PiDirection,

    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Retrieval depth for `retrieve`, `eval` and `bench`.
    pub top_k: usize,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub dropout: f64,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub rcl_weight: f64,
    pub symmetric_contrastive: bool,
    pub negatives: usize,
    pub n_products: usize,
    pub queries_per_group: usize,
    pub image_side: usize,
    pub patch_grid: usize,
    pub histogram_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s1 = Stage1Config::default();
        let s2 = Stage2Config::default();
        let dg = DatagenConfig::default();
        Self {
            seed: 0,
            d: m.d,
            k_intents: m.k_intents,
            lambda: s1.lambda,
            temperature: s1.temperature,
            batch_size: s1.batch_size,
            lr: s1.lr,
            weight_decay: s1.weight_decay,
            epochs_stage1: s1.epochs,
            epochs_stage2: s2.epochs,
            pml_form: s2.pml_form,
            kl_weight: s2.kl_weight,
            n_probe: 2,
            top_m_features: s2.top_m_features,
            rcl_literal: s1.rcl_literal,
            selectivity_quantile: dg.pi.quantile,
            pi_kind: dg.pi.kind,
            pi_direction: dg.pi.direction,
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            top_k: 100,
            vocab_size: m.vocab_size,
            token_dim: m.token_dim,
            dropout: m.dropout,
            decoder_layers: m.decoder_layers,
            decoder_heads: m.decoder_heads,
            rcl_weight: s1.rcl_weight,
            symmetric_contrastive: s1.symmetric_contrastive,
            negatives: s2.negatives,
            n_products: dg.n_products,
            queries_per_group: dg.queries_per_group,
            image_side: dg.image_side,
            patch_grid: dg.patch_grid,
            histogram_bins: dg.histogram_bins,
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(describe(&e, text)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::at(path, pincer_core::Error::Config(format!("cannot read config file: {e}"))))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Core(c) => Error::at(path, c),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            k_intents: self.k_intents,
            vocab_size: self.vocab_size,
            token_dim: self.token_dim,
            image_raw_dim: 2 + self.histogram_bins,
            dropout: self.dropout,
            decoder_layers: self.decoder_layers,
            decoder_heads: self.decoder_heads,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            lambda: self.lambda,
            temperature: self.temperature,
            batch_size: self.batch_size,
            epochs: self.epochs_stage1,
            lr: self.lr,
            weight_decay: self.weight_decay,
            rcl_weight: self.rcl_weight,
            rcl_literal: self.rcl_literal,
            symmetric_contrastive: self.symmetric_contrastive,
            seed: self.seed,
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config {
            epochs: self.epochs_stage2,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            negatives: self.negatives,
            kl_weight: self.kl_weight,
            pml_form: self.pml_form,
            top_m_features: self.top_m_features,
            seed: self.seed,
        }
    }

    pub fn pi(&self) -> PiFunction {
        PiFunction {
            kind: self.pi_kind,
            direction: self.pi_direction,
            quantile: self.selectivity_quantile,
        }
    }

    pub fn datagen_config(&self) -> DatagenConfig {
        DatagenConfig {
            n_products: self.n_products,
            queries_per_group: self.queries_per_group,
            image_side: self.image_side,
            patch_grid: self.patch_grid,
            histogram_bins: self.histogram_bins,
            pi: self.pi(),
            seed: self.seed,
            ..DatagenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // core messages already name the offending field
        let plain = |e: pincer_core::Error| match e {
            pincer_core::Error::Config(m) => Error::config(m),
            other => Error::config(other.to_string()),
        };
        self.model_config().validate().map_err(plain)?;
        self.stage1_config().validate().map_err(plain)?;
        self.stage2_config().validate().map_err(plain)?;
        self.pi().validate().map_err(plain)?;
        self.datagen_config().validate().map_err(plain)?;
        if self.n_probe == 0 || self.n_probe > self.k_intents {
            return Err(Error::config(format!(
                "key `n_probe`: must lie in 1..={} (k_intents), got {}",
                self.k_intents, self.n_probe
            )));
        }
        if self.top_k == 0 {
            return Err(Error::config("key `top_k`: must be positive"));
        }
        if self.n_products < 10 {
            return Err(Error::config(format!("key `n_products`: must be at least 10, got {}", self.n_products)));
        }
        Ok(())
    }
}

/// Message naming the offending key, with its line when the parser reports a span.
fn describe(e: &toml::de::Error, text: &str) -> String {
    let msg = e.message().trim();
    match e.span() {
        Some(s) => {
            let line = text[..s.start].matches('\n').count() + 1;
            let src = text.lines().nth(line - 1).unwrap_or("").trim();
            format!("line {line} (`{src}`): {msg}")
        }
        None => msg.to_string(),
    }
}
