//! Feature store file. The manifest records the width, row counts and, per
//! product, `id text_start text_len image_start image_len`; the payload
//! holds every text row followed by every image row as f32.

use std::path::Path;

use pincer_core::features::{FeatureStore, FeatureTable};
use pincer_core::{Error as CoreError, ProductId};

use crate::error::{Context, Result};
use crate::manifest::{self, Manifest};

pub const FORMAT: &str = "pincer-features";
pub const VERSION: u32 = 1;

/// `(start, len)` runs of each product inside a table sorted by owner.
fn runs(table: &FeatureTable) -> Vec<(ProductId, usize, usize)> {
    let mut out: Vec<(ProductId, usize, usize)> = Vec::new();
    for (i, (id, _)) in table.owners.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.0 == *id => last.2 += 1,
            _ => out.push((*id, i, 1)),
        }
    }
    out
}

pub fn to_bytes(store: &FeatureStore) -> Vec<u8> {
    let text = runs(&store.text);
    let image = runs(&store.image);
    let mut ids: Vec<ProductId> = text.iter().chain(&image).map(|r| r.0).collect();
    ids.sort();
    ids.dedup();
    let find = |rs: &[(ProductId, usize, usize)], id| {
        rs.binary_search_by_key(&id, |r| r.0).map_or((0, 0), |i| (rs[i].1, rs[i].2))
    };
    let mut m = Manifest::new();
    m.push("format", FORMAT)
        .push("version", VERSION)
        .push("d", store.d())
        .push("text_count", store.text.len())
        .push("image_count", store.image.len())
        .push("products", ids.len());
    for id in ids {
        let (ts, tl) = find(&text, id);
        let (is, il) = find(&image, id);
        m.push("product", format!("{} {ts} {tl} {is} {il}", id.0));
    }
    let mut payload = manifest::f32_payload(&store.text.vectors);
    payload.extend(manifest::f32_payload(&store.image.vectors));
    m.encode(&payload)
}

fn owners(runs: &[(ProductId, usize, usize)], count: usize, name: &str) -> pincer_core::Result<Vec<(ProductId, u32)>> {
    let mut out = Vec::with_capacity(count);
    let mut sorted: Vec<_> = runs.iter().filter(|r| r.2 > 0).copied().collect();
    sorted.sort_by_key(|r| r.1);
    for (id, start, len) in sorted {
        if start != out.len() {
            return Err(CoreError::Format(format!("{name} offsets are not contiguous at product {id}")));
        }
        out.extend((0..len as u32).map(|j| (id, j)));
    }
    if out.len() != count {
        return Err(CoreError::Format(format!("{name} offsets cover {} rows, count is {count}", out.len())));
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> pincer_core::Result<FeatureStore> {
    let (m, payload) = Manifest::decode(bytes)?;
    m.expect_kind(FORMAT, VERSION)?;
    let d: usize = m.parse_key("d")?;
    let tc: usize = m.parse_key("text_count")?;
    let ic: usize = m.parse_key("image_count")?;
    let products: usize = m.parse_key("products")?;
    let mut text_runs = Vec::new();
    let mut image_runs = Vec::new();
    for line in m.all("product") {
        let f: Vec<usize> = line
            .split(' ')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| CoreError::Format(format!("bad product offsets `{line}`")))?;
        let [id, ts, tl, is, il] = f[..] else {
            return Err(CoreError::Format(format!("bad product offsets `{line}`")));
        };
        let id = ProductId(u32::try_from(id).map_err(|_| CoreError::Format(format!("product id {id} out of range")))?);
        text_runs.push((id, ts, tl));
        image_runs.push((id, is, il));
    }
    if text_runs.len() != products {
        return Err(CoreError::Format(format!("{} product entries, header says {products}", text_runs.len())));
    }
    manifest::check_len(payload, (tc + ic) * d * 4)?;
    let all = manifest::read_f32s(payload, (tc + ic) * d)?;
    let text = FeatureTable {
        owners: owners(&text_runs, tc, "text")?,
        vectors: all[..tc * d].to_vec(),
    };
    let image = FeatureTable {
        owners: owners(&image_runs, ic, "image")?,
        vectors: all[tc * d..].to_vec(),
    };
    FeatureStore::from_tables(d, text, image)
}

pub fn save(store: &FeatureStore, path: &Path) -> Result<()> {
    manifest::write_atomic(path, &to_bytes(store))
}

/// Loads a store; with `expect_d` set the width must match (dimension error otherwise).
pub fn load(path: &Path, expect_d: Option<usize>) -> Result<FeatureStore> {
    let store = from_bytes(&manifest::read(path)?).at(path)?;
    if let Some(d) = expect_d {
        store.check_dim(d).at(path)?;
    }
    Ok(store)
}
