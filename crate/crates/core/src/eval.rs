//! Precision/recall at k, SumR and the Wilcoxon signed-rank test.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::encoders::TextInput;
use crate::retrieval::{Pipeline, ProductIndex, SearchMode};
use crate::{Error, ProductId, Result};

/// Cutoffs reported in every [`MetricReport`].
pub const CUTOFFS: [usize; 4] = [10, 20, 50, 100];

/// `(precision, recall)` as fractions for one ranked list.
pub fn precision_recall_at_k(ranked: &[ProductId], relevant: &BTreeSet<ProductId>, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::Contract("relevant set is empty".into()));
    }
    let mut seen = BTreeSet::new();
    let hits = ranked
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id) && seen.insert(**id))
        .count();
    Ok((hits as f64 / k as f64, hits as f64 / relevant.len() as f64))
}

/// Macro-averaged metrics in percent.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    #[cfg_attr(feature = "serde", serde(rename = "P@10"))]
    pub p10: f64,
    #[cfg_attr(feature = "serde", serde(rename = "P@20"))]
    pub p20: f64,
    #[cfg_attr(feature = "serde", serde(rename = "P@50"))]
    pub p50: f64,
    #[cfg_attr(feature = "serde", serde(rename = "P@100"))]
    pub p100: f64,
    #[cfg_attr(feature = "serde", serde(rename = "R@10"))]
    pub r10: f64,
    #[cfg_attr(feature = "serde", serde(rename = "R@20"))]
    pub r20: f64,
    #[cfg_attr(feature = "serde", serde(rename = "R@50"))]
    pub r50: f64,
    #[cfg_attr(feature = "serde", serde(rename = "R@100"))]
    pub r100: f64,
    #[cfg_attr(feature = "serde", serde(rename = "SumR"))]
    pub sum_r: f64,
    pub queries: usize,
}

fn round2(x: f64) -> f64 {
    libm::round(x * 100.0) / 100.0
}

impl MetricReport {
    /// Builds a report from percent recalls and precisions at [`CUTOFFS`].
    pub fn from_percentages(precision: [f64; 4], recall: [f64; 4], queries: usize) -> Self {
        Self {
            p10: precision[0],
            p20: precision[1],
            p50: precision[2],
            p100: precision[3],
            r10: recall[0],
            r20: recall[1],
            r50: recall[2],
            r100: recall[3],
            sum_r: recall.iter().sum(),
            queries,
        }
    }

    /// Every figure rounded to two decimals; SumR is the sum of the rounded recalls.
    pub fn rounded(&self) -> Self {
        let p = [self.p10, self.p20, self.p50, self.p100].map(round2);
        let r = [self.r10, self.r20, self.r50, self.r100].map(round2);
        let mut out = Self::from_percentages(p, r, self.queries);
        out.sum_r = round2(out.sum_r);
        out
    }

    pub fn recalls(&self) -> [f64; 4] {
        [self.r10, self.r20, self.r50, self.r100]
    }

    pub fn precisions(&self) -> [f64; 4] {
        [self.p10, self.p20, self.p50, self.p100]
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.rounded();
        writeln!(f, "| P@10 | P@20 | P@50 | P@100 | R@10 | R@20 | R@50 | R@100 | SumR |")?;
        writeln!(f, "|------|------|------|-------|------|------|------|-------|------|")?;
        write!(
            f,
            "| {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.p10, r.p20, r.p50, r.p100, r.r10, r.r20, r.r50, r.r100, r.sum_r
        )
    }
}

/// Per-query recall at each cutoff (fractions), kept for paired tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub per_query_recall: Vec<[f64; 4]>,
}

/// Aggregates ranked lists (at least 100 long, or the whole catalog) against judgments.
pub fn evaluate_rankings(rankings: &[Vec<ProductId>], relevant: &[BTreeSet<ProductId>]) -> Result<Evaluation> {
    if rankings.is_empty() {
        return Err(Error::Contract("no test queries to evaluate".into()));
    }
    if rankings.len() != relevant.len() {
        return Err(Error::dim("relevance judgments", rankings.len(), relevant.len()));
    }
    let mut p = [0.0; 4];
    let mut r = [0.0; 4];
    let mut per_query = Vec::with_capacity(rankings.len());
    for (ranked, rel) in rankings.iter().zip(relevant) {
        let mut row = [0.0; 4];
        for (c, &k) in CUTOFFS.iter().enumerate() {
            let (pk, rk) = precision_recall_at_k(ranked, rel, k)?;
            p[c] += pk;
            r[c] += rk;
            row[c] = rk;
        }
        per_query.push(row);
    }
    let n = rankings.len() as f64;
    Ok(Evaluation {
        report: MetricReport::from_percentages(p.map(|x| 100.0 * x / n), r.map(|x| 100.0 * x / n), rankings.len()),
        per_query_recall: per_query,
    })
}

/// One test query with its relevant products.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub query: TextInput,
    pub relevant: BTreeSet<ProductId>,
}

/// Retrieves top-100 for every query through `pipeline` and scores the rankings.
pub fn evaluate(pipeline: &Pipeline<'_>, index: &ProductIndex, queries: &[EvalQuery], mode: SearchMode, n_probe: usize) -> Result<Evaluation> {
    if queries.is_empty() {
        return Err(Error::Contract("no test queries to evaluate".into()));
    }
    if index.dim() != pipeline.model.config.concat_dim() {
        return Err(Error::dim("index width", pipeline.model.config.concat_dim(), index.dim()));
    }
    let k = CUTOFFS[3];
    let mut rankings = Vec::with_capacity(queries.len());
    for q in queries {
        let enc = pipeline.model.encoders.encode_query(&pipeline.model.store, &q.query)?;
        let pseudo = pipeline.pseudo_from_encoded(&enc)?;
        rankings.push(index.search(pseudo.embedding.values(), k, mode, n_probe)?.ids());
    }
    let relevant: Vec<BTreeSet<ProductId>> = queries.iter().map(|q| q.relevant.clone()).collect();
    evaluate_rankings(&rankings, &relevant)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Largest sample size handled by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// How the p-value of [`wilcoxon_signed_rank_using`] is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact for `n <= WILCOXON_EXACT_MAX`, normal approximation above.
    Auto,
    Exact,
    Normal,
}

/// Two-sided Wilcoxon signed-rank test of `b - a`.
///
/// Zero differences are dropped. Exact enumeration of the null distribution
/// for `n <= 25`, otherwise the normal approximation with continuity and tie
/// corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_using(a, b, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_using(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::dim("paired scores", a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Contract("paired scores must be finite".into()));
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::Contract(format!("need at least 5 non-zero differences, got {n}")));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let use_exact = match method {
        WilcoxonMethod::Auto => n <= WILCOXON_EXACT_MAX,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let (p_value, exact) = if use_exact {
        (exact_p(&ranks, w_plus), true)
    } else {
        let mean = total / 2.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / libm::sqrt(var);
        (libm::erfc(z / core::f64::consts::SQRT_2).min(1.0), false)
    };
    Ok(WilcoxonResult {
        statistic,
        w_plus,
        p_value,
        n,
        exact,
    })
}

/// Exact two-sided p-value: every sign assignment of `ranks` is equally likely.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    // average ranks are multiples of 1/2
    let doubled: Vec<usize> = ranks.iter().map(|r| libm::round(2.0 * r) as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let obs = libm::round(2.0 * w_plus) as usize;
    let all: f64 = counts.iter().sum();
    let lower: f64 = counts[..=obs].iter().sum::<f64>() / all;
    let upper: f64 = counts[obs..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}
