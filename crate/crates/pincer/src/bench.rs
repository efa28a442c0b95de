//! Latency benchmark of full-scan versus clustered top-k.

use std::collections::BTreeSet;
use std::time::Instant;

use pincer_core::retrieval::{ProductIndex, SearchMode};
use pincer_core::{ProductId, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub clusters: usize,
    /// Clusters scanned per query; `K` for the full scan.
    pub n_probe: usize,
    pub k: usize,
    pub p50_us: f64,
    pub p95_us: f64,
    /// Mean overlap with the exact full-scan top-k.
    pub mean_recall_at_k: f64,
    #[serde(skip)]
    pub samples: usize,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times top-`k` for every query, `repetitions` times per mode, after one
/// untimed warm-up pass. Modes run one after another.
pub fn run(
    index: &ProductIndex,
    queries: &[Vec<f64>],
    modes: &[SearchMode],
    repetitions: usize,
    k: usize,
    n_probe: usize,
) -> Result<Vec<BenchReport>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let clusters = index.num_clusters().unwrap_or(0);
    let exact: Vec<BTreeSet<ProductId>> = queries
        .iter()
        .map(|q| Ok(index.topk_full(q, k)?.ids().into_iter().collect()))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let probe = match mode {
            SearchMode::Full => clusters,
            SearchMode::Clustered => n_probe,
        };
        let mut recall = 0.0;
        for (q, ex) in queries.iter().zip(&exact) {
            let got = index.search(q, k, mode, n_probe)?;
            recall += got.hits.iter().filter(|(id, _)| ex.contains(id)).count() as f64 / ex.len().max(1) as f64;
        }
        let mut times = Vec::with_capacity(queries.len() * repetitions);
        for _ in 0..repetitions {
            for q in queries {
                let t = Instant::now();
                let r = index.search(q, k, mode, n_probe)?;
                times.push(t.elapsed().as_secs_f64() * 1e6);
                std::hint::black_box(r);
            }
        }
        times.sort_by(f64::total_cmp);
        out.push(BenchReport {
            mode: mode.as_str().to_string(),
            n: index.len(),
            clusters,
            n_probe: probe,
            k,
            p50_us: percentile(&times, 0.50),
            p95_us: percentile(&times, 0.95),
            mean_recall_at_k: recall / queries.len() as f64,
            samples: times.len(),
        });
    }
    Ok(out)
}
