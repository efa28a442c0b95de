//! Granular product features: per-token text and per-patch image vectors of
//! every catalog product, searched exactly per query token.

use alloc::format;
use alloc::vec::Vec;

use crate::encoders::{EncodedQuery, Encoders};
use crate::diff::ParamStore;
use crate::model::Catalog;
use crate::{Error, ProductId, Result};

/// Feature vectors of one modality, stored row-major as `f32`, sorted by
/// `(product, feature index)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub owners: Vec<(ProductId, u32)>,
    pub vectors: Vec<f32>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.owners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    pub fn row(&self, i: usize, d: usize) -> &[f32] {
        &self.vectors[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    d: usize,
    pub text: FeatureTable,
    pub image: FeatureTable,
}

/// One retrieved feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHit {
    pub product: ProductId,
    pub index: usize,
    pub score: f64,
    pub vector: Vec<f64>,
}

/// Best text and image features for one query token (top-m each, best first).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub text: Vec<FeatureHit>,
    pub image: Vec<FeatureHit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueryResult {
    pub tokens: Vec<TokenFeatures>,
}

impl FeatureQueryResult {
    /// Decoder order: per token, its text hits then its image hits, lifted to `2d`.
    pub fn lifted_sequence(&self) -> Vec<Vec<f64>> {
        let mut seq = Vec::new();
        for t in &self.tokens {
            seq.extend(t.text.iter().map(|h| crate::decoder::lift_text(&h.vector)));
            seq.extend(t.image.iter().map(|h| crate::decoder::lift_image(&h.vector)));
        }
        seq
    }

    pub fn provenance(&self) -> (Vec<(ProductId, usize)>, Vec<(ProductId, usize)>) {
        let mut text = Vec::new();
        let mut image = Vec::new();
        for t in &self.tokens {
            text.extend(t.text.iter().map(|h| (h.product, h.index)));
            image.extend(t.image.iter().map(|h| (h.product, h.index)));
        }
        (text, image)
    }
}

fn push_rows(table: &mut FeatureTable, id: ProductId, rows: impl Iterator<Item = Vec<f64>>) {
    for (j, r) in rows.enumerate() {
        table.owners.push((id, j as u32));
        table.vectors.extend(r.iter().map(|&x| x as f32));
    }
}

impl FeatureStore {
    /// Encodes every catalog product and stores its token and patch features.
    pub fn build(catalog: &Catalog, encoders: &Encoders, store: &ParamStore) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::Config("cannot build a feature store from an empty catalog".into()));
        }
        let mut out = Self {
            d: encoders.d,
            text: FeatureTable::default(),
            image: FeatureTable::default(),
        };
        for (id, product) in catalog.iter() {
            let enc = encoders.encode_product(store, product)?;
            push_rows(&mut out.text, id, enc.text_features.into_iter().map(|e| e.into_values()));
            push_rows(&mut out.image, id, enc.image_features.into_iter().map(|e| e.into_values()));
        }
        Ok(out)
    }

    /// Assembles a store from raw tables, checking shapes and ordering.
    pub fn from_tables(d: usize, text: FeatureTable, image: FeatureTable) -> Result<Self> {
        if d == 0 {
            return Err(Error::Format("feature dimension must be positive".into()));
        }
        for (name, t) in [("text", &text), ("image", &image)] {
            if t.vectors.len() != t.owners.len() * d {
                return Err(Error::Format(format!(
                    "{name} feature payload holds {} values, expected {}",
                    t.vectors.len(),
                    t.owners.len() * d
                )));
            }
            if t.owners.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!("{name} feature rows are not sorted by owner")));
            }
        }
        Ok(Self { d, text, image })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.text.len() + self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.d != d {
            return Err(Error::dim("feature store width", d, self.d));
        }
        Ok(())
    }

    /// Top-`m` text and image features for each query token, by cosine score.
    ///
    /// `text_tokens` are matched against text features and `image_tokens`
    /// against image features; both lists must have the same length.
    pub fn retrieve(&self, text_tokens: &[&[f64]], image_tokens: &[&[f64]], m: usize) -> Result<FeatureQueryResult> {
        if text_tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if text_tokens.len() != image_tokens.len() {
            return Err(Error::dim("query token features", text_tokens.len(), image_tokens.len()));
        }
        if self.text.is_empty() || self.image.is_empty() {
            return Err(Error::State("feature store is empty".into()));
        }
        if m == 0 {
            return Err(Error::Contract("top_m must be at least 1".into()));
        }
        let mut tokens = Vec::with_capacity(text_tokens.len());
        for (t, i) in text_tokens.iter().zip(image_tokens) {
            tokens.push(TokenFeatures {
                text: self.scan(&self.text, t, m)?,
                image: self.scan(&self.image, i, m)?,
            });
        }
        Ok(FeatureQueryResult { tokens })
    }

    /// Convenience wrapper over [`FeatureStore::retrieve`] for an encoded query.
    pub fn retrieve_for(&self, query: &EncodedQuery, m: usize) -> Result<FeatureQueryResult> {
        let t: Vec<&[f64]> = query.token_features.iter().map(|e| e.values()).collect();
        let i: Vec<&[f64]> = query.token_image_features.iter().map(|e| e.values()).collect();
        self.retrieve(&t, &i, m)
    }

    fn scan(&self, table: &FeatureTable, q: &[f64], m: usize) -> Result<Vec<FeatureHit>> {
        if q.len() != self.d {
            return Err(Error::dim("query token feature", self.d, q.len()));
        }
        // (score, row); rows are in owner order so a strict comparison keeps the lowest owner on ties
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(m + 1);
        for r in 0..table.len() {
            let row = table.row(r, self.d);
            let s: f64 = row.iter().zip(q).map(|(&a, &b)| f64::from(a) * b).sum();
            if best.len() == m && s <= best[m - 1].0 {
                continue;
            }
            let pos = best.iter().position(|&(bs, _)| s > bs).unwrap_or(best.len());
            best.insert(pos, (s, r));
            best.truncate(m);
        }
        Ok(best
            .into_iter()
            .map(|(score, r)| {
                let (product, index) = table.owners[r];
                FeatureHit {
                    product,
                    index: index as usize,
                    score,
                    vector: table.row(r, self.d).iter().map(|&x| f64::from(x)).collect(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn table(rows: &[(u32, u32, [f32; 2])]) -> FeatureTable {
        FeatureTable {
            owners: rows.iter().map(|r| (ProductId(r.0), r.1)).collect(),
            vectors: rows.iter().flat_map(|r| r.2).collect(),
        }
    }

    #[test]
    fn exact_match_scores_one() {
        let s = FeatureStore::from_tables(
            2,
            table(&[(1, 0, [1.0, 0.0]), (2, 0, [0.0, 1.0])]),
            table(&[(1, 0, [0.0, 1.0])]),
        )
        .unwrap();
        let r = s.retrieve(&[&[0.0, 1.0]], &[&[0.0, 1.0]], 1).unwrap();
        assert_eq!(r.tokens[0].text[0].product, ProductId(2));
        assert_eq!(r.tokens[0].text[0].score, 1.0);
    }

    #[test]
    fn orthogonal_ties_go_to_lowest_owner() {
        let s = FeatureStore::from_tables(
            2,
            table(&[(3, 0, [1.0, 0.0]), (3, 1, [1.0, 0.0]), (5, 0, [1.0, 0.0])]),
            table(&[(4, 2, [1.0, 0.0]), (7, 0, [1.0, 0.0])]),
        )
        .unwrap();
        let r = s.retrieve(&[&[0.0, 1.0]], &[&[0.0, 1.0]], 2).unwrap();
        let t = &r.tokens[0];
        assert_eq!((t.text[0].product, t.text[0].index, t.text[0].score), (ProductId(3), 0, 0.0));
        assert_eq!((t.text[1].product, t.text[1].index), (ProductId(3), 1));
        assert_eq!((t.image[0].product, t.image[0].index), (ProductId(4), 2));
    }

    #[test]
    fn errors() {
        let s = FeatureStore::from_tables(2, table(&[(1, 0, [1.0, 0.0])]), FeatureTable::default()).unwrap();
        assert!(matches!(s.retrieve(&[&[1.0, 0.0]], &[&[1.0, 0.0]], 1), Err(Error::State(_))));
        assert!(matches!(s.retrieve(&[], &[], 1), Err(Error::EmptyInput)));
        let bad = FeatureTable {
            owners: vec![(ProductId(1), 0)],
            vectors: vec![1.0],
        };
        assert!(matches!(FeatureStore::from_tables(2, bad, FeatureTable::default()), Err(Error::Format(_))));
    }
}
