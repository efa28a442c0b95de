//! Synthetic click-stream data.
//!
//! A catalog of products with template titles and procedurally textured
//! grayscale images; per category, template queries whose impression sets
//! are ranked by token overlap and then filtered by an image statistic
//! (the latent purchase intention) before add-to-cart products are drawn.
//!
//! Also provides the Gaussian pair-cluster set used to study intent routing
//! in isolation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{self, Tensor};
use crate::encoders::{words, GrayImage, ImagePatchGrid, ProductInput, TextInput};
use crate::model::Catalog;
use crate::rng::{self, Rng};
use crate::stage1::TrainingPair;
use crate::{Error, ProductId, Result};

pub const CATEGORIES: [&str; 5] = ["shirt", "dress", "sneakers", "backpack", "jacket"];
pub const COLORS: [&str; 12] = [
    "red", "blue", "green", "black", "white", "yellow", "purple", "orange", "grey", "pink", "navy", "beige",
];
pub const MATERIALS: [&str; 8] = ["cotton", "linen", "wool", "leather", "denim", "silk", "canvas", "fleece"];
pub const STYLES: [&str; 8] = ["casual", "formal", "vintage", "sporty", "classic", "modern", "outdoor", "summer"];

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogProduct {
    pub id: ProductId,
    pub title: String,
    pub category: String,
    pub image: GrayImage,
}

/// `(brightness, mean gradient)`: the mean pixel value and the mean
/// central-difference gradient magnitude.
pub fn image_stats(image: &GrayImage) -> (f64, f64) {
    let n = image.pixels.len() as f64;
    let brightness = image.pixels.iter().sum::<f64>() / n;
    let grad = image.gradient_magnitude().iter().sum::<f64>() / n;
    (brightness, grad)
}

/// Image of side `side` with mean exactly `brightness` and a zero-mean
/// sinusoidal texture of relative amplitude `texture ∈ [0, 1]`.
fn textured_image(side: usize, brightness: f64, texture: f64, fx: i32, fy: i32, phase: f64) -> Result<GrayImage> {
    let amp = texture * brightness.min(1.0 - brightness);
    let tau = core::f64::consts::TAU;
    let mut pixels = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let t = tau * (f64::from(fx) * x as f64 + f64::from(fy) * y as f64) / side as f64 + phase;
            pixels.push((brightness + amp * libm::sin(t)).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(side, side, pixels)
}

/// Deterministic catalog of `n` products (ids `0..n`), spread evenly over [`CATEGORIES`].
pub fn synth_catalog(n: usize, side: usize, seed: u64) -> Result<Vec<CatalogProduct>> {
    if n < 10 {
        return Err(Error::Config(format!("catalog needs at least 10 products, got {n}")));
    }
    if side < 2 {
        return Err(Error::Config(format!("image side must be at least 2, got {side}")));
    }
    let mut r = rng::derive(seed, rng::stream::CATALOG);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let category = CATEGORIES[i % CATEGORIES.len()];
        let color = COLORS[r.random_range(0..COLORS.len())];
        let material = MATERIALS[r.random_range(0..MATERIALS.len())];
        let style = STYLES[r.random_range(0..STYLES.len())];
        let brightness: f64 = r.random_range(0.0..1.0);
        let texture: f64 = r.random_range(0.0..1.0);
        let fx = r.random_range(0..=4);
        let fy = if fx == 0 { r.random_range(1..=4) } else { r.random_range(0..=4) };
        let phase = r.random_range(0.0..core::f64::consts::TAU);
        out.push(CatalogProduct {
            id: ProductId(i as u32),
            title: format!("{style} {color} {material} {category}"),
            category: category.into(),
            image: textured_image(side, brightness, texture, fx, fy, phase)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PiKind {
    Brightness,
    MeanGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PiDirection {
    PreferHigh,
    PreferLow,
}

/// Latent purchase intention: keep the `quantile` fraction of an impression
/// set that is most extreme in the chosen image statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PiFunction {
    pub kind: PiKind,
    pub direction: PiDirection,
    pub quantile: f64,
}

impl Default for PiFunction {
    fn default() -> Self {
        Self {
            kind: PiKind::Brightness,
            direction: PiDirection::PreferHigh,
            quantile: 0.25,
        }
    }
}

impl PiFunction {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(Error::Config(format!(
                "selectivity_quantile must lie in (0, 1], got {}",
                self.quantile
            )));
        }
        Ok(())
    }

    pub fn statistic(&self, image: &GrayImage) -> f64 {
        let (b, g) = image_stats(image);
        match self.kind {
            PiKind::Brightness => b,
            PiKind::MeanGradient => g,
        }
    }

    /// Number of survivors kept from an impression set of `n`.
    pub fn keep(&self, n: usize) -> usize {
        (libm::ceil(self.quantile * n as f64 - 1e-9) as usize).clamp(1, n)
    }

    /// Items of `impressions` passing the filter, most extreme first
    /// (ties by ascending id).
    pub fn filter(&self, impressions: &[(ProductId, f64)]) -> Vec<ProductId> {
        let mut ranked = impressions.to_vec();
        ranked.sort_by(|a, b| {
            let o = match self.direction {
                PiDirection::PreferHigh => b.1.total_cmp(&a.1),
                PiDirection::PreferLow => a.1.total_cmp(&b.1),
            };
            o.then(a.0.cmp(&b.0))
        });
        ranked.truncate(self.keep(impressions.len()));
        ranked.into_iter().map(|x| x.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatagenConfig {
    pub n_products: usize,
    pub queries_per_group: usize,
    pub page_size: usize,
    pub pages: usize,
    /// Add-to-cart products per query are drawn uniformly from `1..=max_atc`.
    pub max_atc: usize,
    pub image_side: usize,
    pub patch_grid: usize,
    pub histogram_bins: usize,
    pub pi: PiFunction,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            n_products: 1000,
            queries_per_group: 170,
            page_size: 20,
            pages: 5,
            max_atc: 5,
            image_side: 32,
            patch_grid: 4,
            histogram_bins: 8,
            pi: PiFunction::default(),
            seed: 0,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        self.pi.validate()?;
        if self.queries_per_group == 0 || self.page_size == 0 || self.pages == 0 || self.max_atc == 0 {
            return Err(Error::Config(
                "queries_per_group, page_size, pages and max_atc must be positive".into(),
            ));
        }
        if self.patch_grid == 0 || self.image_side % self.patch_grid != 0 {
            return Err(Error::Config(format!(
                "image_side {} must be a multiple of patch_grid {}",
                self.image_side, self.patch_grid
            )));
        }
        Ok(())
    }

    /// Raw features per patch produced by [`ImagePatchGrid::from_image`].
    pub fn image_raw_dim(&self) -> usize {
        2 + self.histogram_bins
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How one query's add-to-cart products were chosen.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryRecord {
    pub query: String,
    pub category: String,
    pub split: Split,
    /// Overlap-ranked impression set, best first.
    pub impressions: Vec<ProductId>,
    pub survivors: Vec<ProductId>,
    pub atc: Vec<ProductId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairDataset {
    pub records: Vec<QueryRecord>,
    pub warnings: Vec<String>,
}

impl PairDataset {
    /// `(query, product)` pairs of one split, in generation order.
    pub fn pairs(&self, split: Split) -> Vec<(String, ProductId)> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .flat_map(|r| r.atc.iter().map(|&p| (r.query.clone(), p)))
            .collect()
    }

    /// Relevance judgments of one split.
    pub fn qrels(&self, split: Split) -> Vec<(String, BTreeSet<ProductId>)> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| (r.query.clone(), r.atc.iter().copied().collect()))
            .collect()
    }
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn template_query(category: &str, r: &mut Rng) -> String {
    let color = COLORS[r.random_range(0..COLORS.len())];
    let material = MATERIALS[r.random_range(0..MATERIALS.len())];
    let style = STYLES[r.random_range(0..STYLES.len())];
    match r.random_range(0..6) {
        0 => format!("{color} {material} {category}"),
        1 => format!("best {category} for {style}"),
        2 => format!("{style} {color} {category}"),
        3 => format!("{color} {category}"),
        4 => format!("{material} {style} {category}"),
        _ => format!("cheap {color} {style} {material} {category}"),
    }
}

/// Generates queries, impression sets, PI-filtered survivors and add-to-cart
/// products for every category group, then splits queries 80/10/10.
pub fn generate_pairs(catalog: &[CatalogProduct], cfg: &DatagenConfig) -> Result<PairDataset> {
    cfg.validate()?;
    let mut groups: BTreeMap<&str, Vec<&CatalogProduct>> = BTreeMap::new();
    for p in catalog {
        if p.title.trim().is_empty() {
            return Err(Error::Data(format!("product {} has an empty title", p.id)));
        }
        groups.entry(p.category.as_str()).or_default().push(p);
    }
    if groups.is_empty() {
        return Err(Error::Data("catalog is empty".into()));
    }
    let mut r = rng::derive(cfg.seed, rng::stream::PAIRS);
    let mut out = PairDataset::default();
    let mut seen_queries = BTreeSet::new();
    let impression_size = cfg.page_size * cfg.pages;

    for (category, members) in &groups {
        let title_tokens: Vec<BTreeSet<String>> = members.iter().map(|p| words(&p.title).into_iter().collect()).collect();
        let stats: Vec<f64> = members.iter().map(|p| cfg.pi.statistic(&p.image)).collect();
        let size = impression_size.min(members.len());
        if members.len() < cfg.page_size {
            out.warnings.push(format!(
                "category {category} has {} products, fewer than one page of {}; impression set shrunk",
                members.len(),
                cfg.page_size
            ));
        } else if members.len() < impression_size {
            out.warnings.push(format!(
                "category {category} has {} products; impression set shrunk from {impression_size}",
                members.len()
            ));
        }
        let mut made = 0;
        let mut attempts = 0;
        while made < cfg.queries_per_group && attempts < cfg.queries_per_group * 50 {
            attempts += 1;
            let query = template_query(category, &mut r);
            if !seen_queries.insert(query.clone()) {
                continue;
            }
            made += 1;
            let q_tokens: BTreeSet<String> = words(&query).into_iter().collect();
            // (score, random tie key, position)
            let mut ranked: Vec<(f64, u64, usize)> = title_tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (jaccard(&q_tokens, t), r.random::<u64>(), i))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            ranked.truncate(size);
            let impressions: Vec<ProductId> = ranked.iter().map(|x| members[x.2].id).collect();
            let scored: Vec<(ProductId, f64)> = ranked.iter().map(|x| (members[x.2].id, stats[x.2])).collect();
            let survivors = cfg.pi.filter(&scored);
            let n_atc = r.random_range(1..=cfg.max_atc.min(survivors.len()));
            let mut pool = survivors.clone();
            let (chosen, _) = pool.partial_shuffle(&mut r, n_atc);
            let mut atc = chosen.to_vec();
            atc.sort();
            out.records.push(QueryRecord {
                query,
                category: (*category).into(),
                split: Split::Train,
                impressions,
                survivors,
                atc,
            });
        }
        if made < cfg.queries_per_group {
            out.warnings.push(format!(
                "category {category}: only {made} distinct queries available (asked for {})",
                cfg.queries_per_group
            ));
        }
    }

    let mut order: Vec<usize> = (0..out.records.len()).collect();
    order.shuffle(&mut r);
    let n = order.len();
    let n_train = (n * 8) / 10;
    let n_val = n / 10;
    for (rank, &i) in order.iter().enumerate() {
        out.records[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Counts add-to-cart products that satisfy their PI predicate; errors on the first violation.
///
/// The predicate is recomputed independently: an item passes when fewer than
/// `keep(n)` impressions are strictly more extreme than it.
pub fn check_pi_integrity(catalog: &[CatalogProduct], data: &PairDataset, pi: &PiFunction) -> Result<usize> {
    let stat: BTreeMap<ProductId, f64> = catalog.iter().map(|p| (p.id, pi.statistic(&p.image))).collect();
    let mut checked = 0;
    for rec in &data.records {
        let values: Vec<f64> = rec
            .impressions
            .iter()
            .map(|id| stat.get(id).copied().ok_or_else(|| Error::Data(format!("unknown product {id}"))))
            .collect::<Result<_>>()?;
        let keep = pi.keep(values.len());
        for id in &rec.atc {
            if !rec.impressions.contains(id) {
                return Err(Error::Data(format!("query {:?}: product {id} not in impressions", rec.query)));
            }
            let v = stat[id];
            let better = values
                .iter()
                .filter(|&&o| match pi.direction {
                    PiDirection::PreferHigh => o > v,
                    PiDirection::PreferLow => o < v,
                })
                .count();
            if better >= keep {
                return Err(Error::Data(format!(
                    "query {:?}: product {id} has {better} more extreme impressions (limit {keep})",
                    rec.query
                )));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Encoder inputs for catalog products.
pub fn to_catalog(products: &[CatalogProduct], vocab_size: usize, grid: usize, bins: usize) -> Result<Catalog> {
    let items = products
        .iter()
        .map(|p| {
            Ok((
                p.id,
                ProductInput {
                    title: TextInput::Tokens(crate::encoders::tokenize(&p.title, vocab_size)?),
                    image: ImagePatchGrid::from_image(&p.image, grid, bins)?,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Catalog::new(items)
}

/// Tokenized training pairs.
pub fn to_training_pairs(pairs: &[(String, ProductId)], vocab_size: usize) -> Result<Vec<TrainingPair>> {
    pairs
        .iter()
        .map(|(q, p)| {
            Ok(TrainingPair {
                query: TextInput::Tokens(crate::encoders::tokenize(q, vocab_size)?),
                product: *p,
            })
        })
        .collect()
}

/// Shape of the Gaussian pair-cluster set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPairConfig {
    pub groups: usize,
    pub noise: f64,
    pub products_per_group: usize,
    pub train_pairs_per_group: usize,
    pub test_pairs_per_group: usize,
    pub tokens_per_item: usize,
    pub patches_per_item: usize,
    pub token_dim: usize,
    pub image_raw_dim: usize,
    pub seed: u64,
}

impl Default for GaussianPairConfig {
    fn default() -> Self {
        Self {
            groups: 8,
            noise: 0.1,
            products_per_group: 16,
            train_pairs_per_group: 64,
            test_pairs_per_group: 16,
            tokens_per_item: 3,
            patches_per_item: 4,
            token_dim: 16,
            image_raw_dim: 10,
            seed: 0,
        }
    }
}

/// Latent pair clusters: every group has its own (independent) centers for
/// query tokens, product title tokens and product patches; items are noisy
/// draws around their group's centers.
#[derive(Debug, Clone)]
pub struct GaussianPairs {
    pub catalog: Catalog,
    pub product_group: BTreeMap<ProductId, usize>,
    pub train: Vec<TrainingPair>,
    pub test: Vec<TrainingPair>,
}

fn unit_center(dim: usize, r: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
    diff::normalize(&mut v);
    v
}

fn noisy_rows(center: &[f64], rows: usize, noise: f64, r: &mut Rng) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * center.len());
    for _ in 0..rows {
        for &c in center {
            let e: f64 = StandardNormal.sample(r);
            data.push(c + noise * e);
        }
    }
    Tensor::new(rows, center.len(), data)
}

pub fn gaussian_pair_clusters(cfg: &GaussianPairConfig) -> Result<GaussianPairs> {
    if cfg.groups == 0 || cfg.products_per_group == 0 || cfg.tokens_per_item == 0 || cfg.patches_per_item == 0 {
        return Err(Error::Config("gaussian pair clusters need positive sizes".into()));
    }
    let mut r = rng::derive(cfg.seed, rng::stream::SYNTHETIC);
    let q_centers: Vec<Vec<f64>> = (0..cfg.groups).map(|_| unit_center(cfg.token_dim, &mut r)).collect();
    let t_centers: Vec<Vec<f64>> = (0..cfg.groups).map(|_| unit_center(cfg.token_dim, &mut r)).collect();
    let i_centers: Vec<Vec<f64>> = (0..cfg.groups).map(|_| unit_center(cfg.image_raw_dim, &mut r)).collect();
    let mut items = Vec::new();
    let mut product_group = BTreeMap::new();
    for g in 0..cfg.groups {
        for j in 0..cfg.products_per_group {
            let id = ProductId((g * cfg.products_per_group + j) as u32);
            items.push((
                id,
                ProductInput {
                    title: TextInput::Vectors(noisy_rows(&t_centers[g], cfg.tokens_per_item, cfg.noise, &mut r)?),
                    image: ImagePatchGrid::from_features(noisy_rows(&i_centers[g], cfg.patches_per_item, cfg.noise, &mut r)?),
                },
            ));
            product_group.insert(id, g);
        }
    }
    let pairs = |per_group: usize, r: &mut Rng| -> Result<Vec<TrainingPair>> {
        let mut v = Vec::with_capacity(per_group * cfg.groups);
        for g in 0..cfg.groups {
            for _ in 0..per_group {
                let j = r.random_range(0..cfg.products_per_group);
                v.push(TrainingPair {
                    query: TextInput::Vectors(noisy_rows(&q_centers[g], cfg.tokens_per_item, cfg.noise, r)?),
                    product: ProductId((g * cfg.products_per_group + j) as u32),
                });
            }
        }
        v.shuffle(r);
        Ok(v)
    };
    let train = pairs(cfg.train_pairs_per_group, &mut r)?;
    let test = pairs(cfg.test_pairs_per_group, &mut r)?;
    Ok(GaussianPairs {
        catalog: Catalog::new(items)?,
        product_group,
        train,
        test,
    })
}
