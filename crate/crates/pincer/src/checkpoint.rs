//! Checkpoints: run config snapshot, stage marker and every named parameter
//! array (f64, bit-exact), guarded by a SHA-256 checksum.
//!
//! Layout: manifest (`format`, `version`, `stage`, `codebook_steps`,
//! `config_bytes`, one `array=name rows cols` per tensor, `checksum`), then
//! the TOML config followed by the concatenated array values. The checksum
//! covers every manifest line before it plus the payload.

use std::path::Path;

use pincer_core::diff::Tensor;
use pincer_core::model::{Model, Stage};
use pincer_core::Error as CoreError;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Context, Result};
use crate::manifest::{self, Manifest};

pub const FORMAT: &str = "pincer-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: Stage,
    pub codebook_steps: u64,
    pub arrays: Vec<(String, Tensor)>,
}

fn checksum(header: &str, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(header.as_bytes());
    h.update(payload);
    format!("sha256:{}", hex::encode(h.finalize()))
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig) -> Self {
        Self {
            config: config.clone(),
            stage: model.stage(),
            codebook_steps: model.codebook_steps,
            arrays: model.named_arrays().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the model; its stage must agree with the stored marker.
    pub fn to_model(&self) -> pincer_core::Result<Model> {
        let m = Model::from_arrays(self.config.model_config(), self.arrays.clone(), self.codebook_steps)?;
        if m.stage() != self.stage {
            return Err(CoreError::Format(format!(
                "checkpoint is marked stage {} but its arrays describe stage {}",
                self.stage.as_str(),
                m.stage().as_str()
            )));
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_toml();
        let mut payload = config.clone().into_bytes();
        let mut m = Manifest::new();
        m.push("format", FORMAT)
            .push("version", VERSION)
            .push("stage", self.stage.as_str())
            .push("codebook_steps", self.codebook_steps)
            .push("config_bytes", config.len());
        for (name, t) in &self.arrays {
            m.push("array", format!("{name} {} {}", t.rows(), t.cols()));
            payload.extend(manifest::f64_payload(t.data()));
        }
        let sum = checksum(&m.to_text(), &payload);
        m.push("checksum", sum);
        m.encode(&payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> pincer_core::Result<Self> {
        let (m, payload) = Manifest::decode(bytes)?;
        m.expect_kind(FORMAT, VERSION)?;
        let stored = m.require("checksum")?;
        let mut unsigned = Manifest::new();
        for (k, v) in m.entries().iter().filter(|(k, _)| k != "checksum") {
            unsigned.push(k, v);
        }
        if checksum(&unsigned.to_text(), payload) != stored {
            return Err(CoreError::Format("checkpoint checksum mismatch: file is corrupted".into()));
        }
        let stage_raw = m.require("stage")?;
        let stage = Stage::parse(stage_raw)
            .ok_or_else(|| CoreError::Format(format!("unknown stage marker `{stage_raw}`")))?;
        let codebook_steps = m.parse_key("codebook_steps")?;
        let config_bytes: usize = m.parse_key("config_bytes")?;
        if config_bytes > payload.len() {
            return Err(CoreError::Format("config section exceeds the payload".into()));
        }
        let text = std::str::from_utf8(&payload[..config_bytes])
            .map_err(|_| CoreError::Format("embedded config is not UTF-8".into()))?;
        let config = RunConfig::from_toml(text)
            .map_err(|e| CoreError::Format(format!("embedded config: {e}")))?;
        let mut rest = &payload[config_bytes..];
        let mut arrays = Vec::new();
        for line in m.all("array") {
            let parts: Vec<&str> = line.split(' ').collect();
            let bad = || CoreError::Format(format!("bad array entry `{line}`"));
            let [name, rows, cols] = parts[..] else { return Err(bad()) };
            let rows: usize = rows.parse().map_err(|_| bad())?;
            let cols: usize = cols.parse().map_err(|_| bad())?;
            let n = rows * cols * 8;
            if rest.len() < n {
                return Err(CoreError::Format(format!("truncated payload in array `{name}`")));
            }
            let t = Tensor::new(rows, cols, manifest::read_f64s(&rest[..n]))?;
            rest = &rest[n..];
            arrays.push((name.to_string(), t));
        }
        if !rest.is_empty() {
            return Err(CoreError::Format(format!("{} trailing payload bytes", rest.len())));
        }
        Ok(Self {
            config,
            stage,
            codebook_steps,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        manifest::write_atomic(path, &self.to_bytes())
    }

    /// Loads a checkpoint; a missing file is a state error (a stage was not run yet).
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(crate::Error::at(
                path,
                CoreError::State("checkpoint not found; run the training stage that produces it first".into()),
            ));
        }
        Self::from_bytes(&manifest::read(path)?).at(path)
    }
}
