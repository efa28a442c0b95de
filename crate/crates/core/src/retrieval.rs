//! Top-k product retrieval over pre-computed product embeddings, by exhaustive
//! scan or restricted to the intent clusters nearest the query.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::ops::Range;

use crate::codebook::IntentCodebook;
use crate::decoder::{DecoderInput, PseudoProduct};
use crate::encoders::{Embedding, Space};
use crate::features::FeatureStore;
use crate::model::Model;
use crate::{Error, ProductId, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SearchMode {
    Full,
    Clustered,
}

impl SearchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchMode::Full => "full",
            SearchMode::Clustered => "clustered",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Clusters {
    /// `K × dim` centroids (the intent vectors), row-major.
    centroids: Vec<f64>,
    k: usize,
    ranges: Vec<Range<usize>>,
}

/// Product embeddings, one unit-norm row per product.
///
/// Rows are kept as `f32`. With clusters attached, rows are grouped so each
/// cluster occupies a contiguous range (ascending id within a cluster).
#[derive(Debug, Clone, PartialEq)]
pub struct ProductIndex {
    dim: usize,
    ids: Vec<ProductId>,
    vectors: Vec<f32>,
    clusters: Option<Clusters>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Best first; scores non-increasing, ties by ascending id.
    pub hits: Vec<(ProductId, f32)>,
    pub k: usize,
    pub mode: SearchMode,
    /// Rows actually scored.
    pub candidates: usize,
    /// Set when fewer than `k` candidates were available.
    pub truncated: bool,
    /// Wall-clock scan time; filled in by callers that measure it.
    pub elapsed_us: Option<u64>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<ProductId> {
        self.hits.iter().map(|h| h.0).collect()
    }
}

/// Heap entry ordered so the heap top is the *worst* kept hit.
#[derive(Clone, Copy, PartialEq)]
struct Entry(f32, ProductId);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // better = higher score, then lower id; BinaryHeap is a max-heap so invert "better"
        other.0.total_cmp(&self.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[inline]
fn dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

impl ProductIndex {
    /// Builds an index sorted by product id. Rows must be unit-norm within 1e-6.
    pub fn new(mut entries: Vec<(ProductId, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput);
        }
        entries.sort_by_key(|e| e.0);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Data(format!("duplicate product id {} in index", w[0].0)));
        }
        let dim = entries[0].1.len();
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::dim("index row", dim, v.len()));
            }
            let n = crate::diff::l2_norm(&v);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("index row for product {id} has norm {n}")));
            }
            ids.push(id);
            vectors.extend(v.iter().map(|&x| x as f32));
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            clusters: None,
        })
    }

    /// Assembles an index from raw parts (ids ascending within each cluster range).
    pub fn from_parts(dim: usize, ids: Vec<ProductId>, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || vectors.len() != ids.len() * dim {
            return Err(Error::Format(format!(
                "index payload holds {} values for {} rows of width {dim}",
                vectors.len(),
                ids.len()
            )));
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            clusters: None,
        })
    }

    /// Groups rows by their nearest intent vector.
    pub fn with_clusters(mut self, codebook: &IntentCodebook) -> Result<Self> {
        if codebook.dim() != self.dim {
            return Err(Error::dim("codebook width", self.dim, codebook.dim()));
        }
        self.clusters = None;
        let k = codebook.k();
        let mut assign = Vec::with_capacity(self.ids.len());
        let mut row = alloc::vec![0.0f64; self.dim];
        for r in 0..self.ids.len() {
            for (o, &x) in row.iter_mut().zip(self.row(r)) {
                *o = f64::from(x);
            }
            assign.push(codebook.nearest(&row)?.index);
        }
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by_key(|&r| (assign[r], self.ids[r]));
        let mut ids = Vec::with_capacity(order.len());
        let mut vectors = Vec::with_capacity(self.vectors.len());
        let mut ranges = alloc::vec![0..0; k];
        for (pos, &r) in order.iter().enumerate() {
            let c = assign[r];
            if ranges[c].is_empty() {
                ranges[c] = pos..pos;
            }
            ranges[c].end = pos + 1;
            ids.push(self.ids[r]);
            vectors.extend_from_slice(self.row(r));
        }
        self.ids = ids;
        self.vectors = vectors;
        self.clusters = Some(Clusters {
            centroids: codebook.vectors().data().to_vec(),
            k,
            ranges,
        });
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ProductId] {
        &self.ids
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.vectors[r * self.dim..(r + 1) * self.dim]
    }

    pub fn num_clusters(&self) -> Option<usize> {
        self.clusters.as_ref().map(|c| c.k)
    }

    /// Row range of each cluster, when clustered.
    pub fn cluster_ranges(&self) -> Option<&[Range<usize>]> {
        self.clusters.as_ref().map(|c| c.ranges.as_slice())
    }

    fn check_query(&self, q: &[f64], k: usize) -> Result<Vec<f32>> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if q.len() != self.dim {
            return Err(Error::dim("retrieval query", self.dim, q.len()));
        }
        Ok(q.iter().map(|&x| x as f32).collect())
    }

    fn scan(&self, q: &[f32], rows: impl Iterator<Item = Range<usize>>, k: usize, mode: SearchMode) -> RetrievalResult {
        let mut heap: BinaryHeap<Entry> = BinaryHeap::with_capacity(k + 1);
        let mut candidates = 0;
        for range in rows {
            candidates += range.len();
            for r in range {
                let e = Entry(dot32(self.row(r), q), self.ids[r]);
                if heap.len() < k {
                    heap.push(e);
                } else if e < *heap.peek().expect("k >= 1") {
                    heap.pop();
                    heap.push(e);
                }
            }
        }
        // ascending order under Entry's Ord is best-first
        let hits = heap.into_sorted_vec().into_iter().map(|e| (e.1, e.0)).collect();
        RetrievalResult {
            hits,
            k,
            mode,
            candidates,
            truncated: candidates < k,
            elapsed_us: None,
        }
    }

    /// Exact top-k by dot product over every row.
    pub fn topk_full(&self, query: &[f64], k: usize) -> Result<RetrievalResult> {
        let q = self.check_query(query, k)?;
        Ok(self.scan(&q, core::iter::once(0..self.len()), k, SearchMode::Full))
    }

    /// Indices of the `n_probe` clusters whose centroids are nearest to `query`
    /// (ties by lowest index), nearest first.
    pub fn probe_order(&self, query: &[f64], n_probe: usize) -> Result<Vec<usize>> {
        let c = self
            .clusters
            .as_ref()
            .ok_or_else(|| Error::State("index has no cluster map".into()))?;
        if query.len() != self.dim {
            return Err(Error::dim("retrieval query", self.dim, query.len()));
        }
        let mut d: Vec<(f64, usize)> = (0..c.k)
            .map(|i| {
                let cen = &c.centroids[i * self.dim..(i + 1) * self.dim];
                (crate::diff::l2_distance(cen, query), i)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d.into_iter().take(n_probe.min(c.k)).map(|x| x.1).collect())
    }

    /// Exact top-k within the `n_probe` nearest intent clusters.
    pub fn topk_clustered(&self, query: &[f64], k: usize, n_probe: usize) -> Result<RetrievalResult> {
        if n_probe == 0 {
            return Err(Error::Contract("n_probe must be at least 1".into()));
        }
        let q = self.check_query(query, k)?;
        let probes = self.probe_order(query, n_probe)?;
        let ranges = &self.clusters.as_ref().expect("checked by probe_order").ranges;
        Ok(self.scan(&q, probes.iter().map(|&c| ranges[c].clone()), k, SearchMode::Clustered))
    }

    pub fn search(&self, query: &[f64], k: usize, mode: SearchMode, n_probe: usize) -> Result<RetrievalResult> {
        match mode {
            SearchMode::Full => self.topk_full(query, k),
            SearchMode::Clustered => self.topk_clustered(query, k, n_probe),
        }
    }
}

/// Everything needed to turn query text into a pseudo product.
pub struct Pipeline<'a> {
    pub model: &'a Model,
    pub features: Option<&'a FeatureStore>,
    pub top_m: usize,
}

impl Pipeline<'_> {
    /// Query text → tokens → query embedding → nearest intent → retrieved
    /// features → decoder output. Without a decoder (or feature store) the
    /// query embedding itself is returned, flagged as a fallback.
    pub fn query_to_pseudo(&self, text: &str) -> Result<PseudoProduct> {
        let enc = self.model.encode_text_query(text)?;
        self.pseudo_from_encoded(&enc)
    }

    pub fn pseudo_from_encoded(&self, enc: &crate::encoders::EncodedQuery) -> Result<PseudoProduct> {
        let cb = self.model.intent_codebook();
        let intent = cb.nearest(enc.concat.values())?;
        let (Some(decoder), Some(store)) = (&self.model.decoder, self.features) else {
            return Ok(PseudoProduct {
                embedding: enc.concat.clone(),
                intent: intent.index,
                text_features: Vec::new(),
                image_features: Vec::new(),
                fallback: true,
            });
        };
        store.check_dim(self.model.config.d)?;
        let feats = store.retrieve_for(enc, self.top_m)?;
        let mut seq = feats.lifted_sequence();
        seq.truncate(decoder.max_slots());
        let input = DecoderInput {
            query: enc.concat.values().to_vec(),
            intent: cb.vector(intent.index).to_vec(),
            features: seq,
        };
        let out = decoder.generate(&self.model.store, &input)?;
        let (text_features, image_features) = feats.provenance();
        Ok(PseudoProduct {
            embedding: Embedding::new(out, Space::Concatenated)?,
            intent: intent.index,
            text_features,
            image_features,
            fallback: false,
        })
    }
}
