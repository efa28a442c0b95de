//! JSON-lines dataset files.
//!
//! - `catalog.jsonl`: `{id, title, category, width, height, image}` with the
//!   image as an inline row-major array of pixel values
//! - `pairs-{train,val,test}.jsonl`: `{query, product_id}`
//! - `qrels.jsonl`: `{query, split, product_ids}`
//! - `records.jsonl`: impressions, PI survivors and add-to-cart per query

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use pincer_core::datagen::{CatalogProduct, PairDataset, QueryRecord, Split};
use pincer_core::encoders::GrayImage;
use pincer_core::{Error as CoreError, ProductId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Context, Error, Result};
use crate::manifest;

pub const CATALOG: &str = "catalog.jsonl";
pub const QRELS: &str = "qrels.jsonl";
pub const RECORDS: &str = "records.jsonl";

pub fn pairs_file(split: Split) -> String {
    format!("pairs-{}.jsonl", split_name(split))
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogLine {
    pub id: ProductId,
    pub title: String,
    pub category: String,
    pub width: usize,
    pub height: usize,
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairLine {
    pub query: String,
    pub product_id: ProductId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QrelLine {
    pub query: String,
    pub split: Split,
    pub product_ids: Vec<ProductId>,
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("serializable record");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    manifest::write_atomic(path, &to_jsonl(items))
}

pub fn append_jsonl<T: Serialize>(file: &mut std::fs::File, path: &Path, item: &T) -> Result<()> {
    let mut line = serde_json::to_vec(item).expect("serializable record");
    line.push(b'\n');
    file.write_all(&line).at(path)
}

/// Reads one record per non-empty line; errors name the line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::at(path, CoreError::Format(format!("line {}: {e}", i + 1))))?;
        out.push(rec);
    }
    Ok(out)
}

/// On-disk layout of a generated dataset.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, products: &[CatalogProduct], data: &PairDataset) -> Result<()> {
        let lines: Vec<CatalogLine> = products
            .iter()
            .map(|p| CatalogLine {
                id: p.id,
                title: p.title.clone(),
                category: p.category.clone(),
                width: p.image.width,
                height: p.image.height,
                image: p.image.pixels.clone(),
            })
            .collect();
        write_jsonl(&self.path(CATALOG), &lines)?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let pairs: Vec<PairLine> = data
                .pairs(split)
                .into_iter()
                .map(|(query, product_id)| PairLine { query, product_id })
                .collect();
            write_jsonl(&self.path(&pairs_file(split)), &pairs)?;
        }
        let qrels: Vec<QrelLine> = data
            .records
            .iter()
            .map(|r| QrelLine {
                query: r.query.clone(),
                split: r.split,
                product_ids: r.atc.clone(),
            })
            .collect();
        write_jsonl(&self.path(QRELS), &qrels)?;
        write_jsonl(&self.path(RECORDS), &data.records)
    }

    pub fn catalog(&self) -> Result<Vec<CatalogProduct>> {
        let path = self.path(CATALOG);
        read_jsonl::<CatalogLine>(&path)?
            .into_iter()
            .map(|l| {
                let image = GrayImage::new(l.width, l.height, l.image)
                    .map_err(|e| Error::at(&path, CoreError::Data(format!("product {}: {e}", l.id))))?;
                Ok(CatalogProduct {
                    id: l.id,
                    title: l.title,
                    category: l.category,
                    image,
                })
            })
            .collect()
    }

    pub fn pairs(&self, split: Split) -> Result<Vec<(String, ProductId)>> {
        Ok(read_jsonl::<PairLine>(&self.path(&pairs_file(split)))?
            .into_iter()
            .map(|p| (p.query, p.product_id))
            .collect())
    }

    pub fn qrels(&self, split: Split) -> Result<Vec<(String, BTreeSet<ProductId>)>> {
        Ok(read_jsonl::<QrelLine>(&self.path(QRELS))?
            .into_iter()
            .filter(|q| q.split == split)
            .map(|q| (q.query, q.product_ids.into_iter().collect()))
            .collect())
    }

    pub fn records(&self) -> Result<PairDataset> {
        Ok(PairDataset {
            records: read_jsonl::<QueryRecord>(&self.path(RECORDS))?,
            warnings: Vec::new(),
        })
    }
}
