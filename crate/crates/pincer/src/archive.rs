//! Embedding archive: `format`, `version`, `d`, `count`, `space` (and an
//! optional comma-separated `ids` list) followed by `count × d` f32 values.

use std::path::Path;

use pincer_core::encoders::{Embedding, Space};
use pincer_core::{Error as CoreError, ProductId};

use crate::error::{Context, Result};
use crate::manifest::{self, Manifest};

pub const FORMAT: &str = "pincer-embeddings";
pub const VERSION: u32 = 1;

/// Decoded archive contents (values exactly as stored).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    pub space: Space,
    pub dim: usize,
    pub ids: Option<Vec<ProductId>>,
    pub values: Vec<f32>,
}

impl EmbeddingArchive {
    pub fn from_embeddings(space: Space, ids: Option<Vec<ProductId>>, rows: &[Embedding]) -> pincer_core::Result<Self> {
        let dim = rows.first().map_or(0, Embedding::dim);
        if let Some(ids) = &ids {
            if ids.len() != rows.len() {
                return Err(CoreError::Data(format!("{} ids for {} embeddings", ids.len(), rows.len())));
            }
        }
        let mut values = Vec::with_capacity(rows.len() * dim);
        for e in rows {
            if e.dim() != dim {
                return Err(CoreError::Dimension {
                    context: "archive row",
                    expected: dim,
                    found: e.dim(),
                });
            }
            if e.space() != space {
                return Err(CoreError::Data(format!(
                    "embedding in space {} written to a {} archive",
                    e.space().as_str(),
                    space.as_str()
                )));
            }
            values.extend(e.values().iter().map(|&v| v as f32));
        }
        Ok(Self { space, dim, ids, values })
    }

    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut m = Manifest::new();
        m.push("format", FORMAT)
            .push("version", VERSION)
            .push("d", self.dim)
            .push("count", self.count())
            .push("space", self.space.as_str());
        if let Some(ids) = &self.ids {
            let list: Vec<String> = ids.iter().map(|i| i.0.to_string()).collect();
            m.push("ids", list.join(","));
        }
        m.encode(&manifest::f32_payload(&self.values))
    }

    pub fn from_bytes(bytes: &[u8]) -> pincer_core::Result<Self> {
        let (m, payload) = Manifest::decode(bytes)?;
        m.expect_kind(FORMAT, VERSION)?;
        let dim: usize = m.parse_key("d")?;
        let count: usize = m.parse_key("count")?;
        let space = Space::parse(m.require("space")?)
            .ok_or_else(|| CoreError::Format(format!("unknown space tag `{}`", m.get("space").unwrap_or(""))))?;
        let ids = match m.get("ids") {
            None => None,
            Some("") => Some(Vec::new()),
            Some(raw) => Some(
                raw.split(',')
                    .map(|s| s.parse().map(ProductId))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CoreError::Format("manifest key `ids` is not a list of integers".into()))?,
            ),
        };
        if ids.as_ref().is_some_and(|ids| ids.len() != count) {
            return Err(CoreError::Format(format!("`ids` lists {} entries, count is {count}", ids.unwrap().len())));
        }
        let values = manifest::read_f32s(payload, dim * count)?;
        Ok(Self { space, dim, ids, values })
    }

    /// Re-normalized embeddings, checked against the configured half width `d`.
    pub fn embeddings(&self, d: usize) -> pincer_core::Result<Vec<Embedding>> {
        let want = self.space.dim(d);
        if self.dim != want {
            return Err(CoreError::Format(format!(
                "archive vectors have width {}, configuration expects {want} for space {} (d = {d})",
                self.dim,
                self.space.as_str()
            )));
        }
        (0..self.count())
            .map(|i| {
                let row = self.row(i);
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(CoreError::Data(format!("row {i} holds a non-finite value at {j}")));
                }
                Embedding::new(row.iter().map(|&v| f64::from(v)).collect(), self.space)
                    .map_err(|e| CoreError::Data(format!("row {i}: {e}")))
            })
            .collect()
    }
}

pub fn export(path: &Path, space: Space, ids: Option<Vec<ProductId>>, rows: &[Embedding]) -> Result<()> {
    let a = EmbeddingArchive::from_embeddings(space, ids, rows).at(path)?;
    manifest::write_atomic(path, &a.to_bytes())
}

pub fn read_archive(path: &Path) -> Result<EmbeddingArchive> {
    EmbeddingArchive::from_bytes(&manifest::read(path)?).at(path)
}

/// Loads an archive of precomputed vectors for a model of half width `d`.
pub fn ingest(path: &Path, d: usize) -> Result<(Option<Vec<ProductId>>, Vec<Embedding>)> {
    let a = read_archive(path)?;
    let rows = a.embeddings(d).at(path)?;
    Ok((a.ids, rows))
}
