//! Toy query/product encoders and the trainable projectors.
//!
//! Text is tokenized by a hashing vocabulary and embedded through a learned
//! table; images are reduced to per-patch statistics and embedded through a
//! learned linear map. Four projectors (feed-forward, GELU, layer norm,
//! dropout) place the results into the `d`-wide text and image halves of
//! the shared space. Precomputed encoder outputs can bypass the table by
//! supplying token vectors directly.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::diff::{self, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Which part of the shared space an [`Embedding`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Space {
    QueryText,
    QueryImage,
    ProductText,
    ProductImage,
    Concatenated,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::QueryText => "query-text",
            Space::QueryImage => "query-image",
            Space::ProductText => "product-text",
            Space::ProductImage => "product-image",
            Space::Concatenated => "concatenated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "query-text" => Space::QueryText,
            "query-image" => Space::QueryImage,
            "product-text" => Space::ProductText,
            "product-image" => Space::ProductImage,
            "concatenated" => Space::Concatenated,
            _ => return None,
        })
    }

    /// Dimension of vectors in this space for half-width `d`.
    pub fn dim(self, d: usize) -> usize {
        match self {
            Space::Concatenated => 2 * d,
            _ => d,
        }
    }
}

/// Unit-L2 vector tagged with its space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    space: Space,
}

impl Embedding {
    /// Normalizes `values`; fails on empty, non-finite or all-zero input.
    pub fn new(mut values: Vec<f64>, space: Space) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("embedding contains non-finite values".into()));
        }
        if diff::l2_norm(&values) == 0.0 {
            return Err(Error::Data("cannot normalize a zero embedding".into()));
        }
        diff::normalize(&mut values);
        Ok(Self { values, space })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Lowercased word pieces hashed into a fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokenSequence {
    pub tokens: Vec<usize>,
    pub source: String,
}

impl TextTokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// 64-bit FNV-1a; stable across platforms and runs.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Splits on anything that is not alphanumeric, lowercasing each piece.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

pub fn tokenize(text: &str, vocab_size: usize) -> Result<TextTokenSequence> {
    let pieces = words(text);
    if pieces.is_empty() {
        return Err(Error::EmptyInput);
    }
    let tokens = pieces
        .iter()
        .map(|w| (stable_hash(w.as_bytes()) % vocab_size as u64) as usize)
        .collect();
    Ok(TextTokenSequence {
        tokens,
        source: String::from(text),
    })
}

/// Text as either hashed tokens or precomputed token vectors (`rows × token_dim`).
#[derive(Debug, Clone, PartialEq)]
pub enum TextInput {
    Tokens(TextTokenSequence),
    Vectors(Tensor),
}

impl TextInput {
    pub fn len(&self) -> usize {
        match self {
            TextInput::Tokens(t) => t.len(),
            TextInput::Vectors(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Grayscale pixel grid with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput);
        }
        if pixels.len() != width * height {
            return Err(Error::dim("image pixels", width * height, pixels.len()));
        }
        if !pixels.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Gradient magnitude per pixel: central differences inside, one-sided at borders.
    pub fn gradient_magnitude(&self) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
                let gx = diff(self.at(x0, y), self.at(x1, y), x1 - x0);
                let gy = diff(self.at(x, y0), self.at(x, y1), y1 - y0);
                out[y * w + x] = libm::sqrt(gx * gx + gy * gy);
            }
        }
        out
    }
}

/// Per-patch raw statistics of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatchGrid {
    /// `P × raw_dim` feature rows.
    pub patches: Tensor,
    pub image_width: usize,
    pub image_height: usize,
}

impl ImagePatchGrid {
    /// Splits `image` into a `grid × grid` lattice; each patch yields
    /// `[mean intensity, mean gradient magnitude, histogram (bins)]`.
    pub fn from_image(image: &GrayImage, grid: usize, bins: usize) -> Result<Self> {
        if grid == 0 || image.width % grid != 0 || image.height % grid != 0 {
            return Err(Error::Config(alloc::format!(
                "image {}x{} is not divisible into a {grid}x{grid} patch grid",
                image.width,
                image.height
            )));
        }
        let grad = image.gradient_magnitude();
        let (pw, ph) = (image.width / grid, image.height / grid);
        let count = (pw * ph) as f64;
        let mut rows = Vec::with_capacity(grid * grid);
        for gy in 0..grid {
            for gx in 0..grid {
                let mut feat = vec![0.0; 2 + bins];
                for y in gy * ph..(gy + 1) * ph {
                    for x in gx * pw..(gx + 1) * pw {
                        let v = image.at(x, y);
                        feat[0] += v;
                        feat[1] += grad[y * image.width + x];
                        if bins > 0 {
                            let b = ((v * bins as f64) as usize).min(bins - 1);
                            feat[2 + b] += 1.0;
                        }
                    }
                }
                feat.iter_mut().for_each(|f| *f /= count);
                rows.push(feat);
            }
        }
        Ok(Self {
            patches: Tensor::from_rows(&rows)?,
            image_width: image.width,
            image_height: image.height,
        })
    }

    /// Wraps precomputed patch features.
    pub fn from_features(patches: Tensor) -> Self {
        Self {
            patches,
            image_width: 0,
            image_height: 0,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }
}

/// A catalog product as seen by the encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductInput {
    pub title: TextInput,
    pub image: ImagePatchGrid,
}

/// Forward-pass mode: dropout is active only while training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

/// Feed-forward → GELU → layer norm → dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projector {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub dropout: f64,
}

impl Projector {
    pub fn create(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                alloc::format!("{name}.weight"),
                xavier(in_dim, out_dim, rng),
            )?,
            bias: store.add(alloc::format!("{name}.bias"), Tensor::zeros(1, out_dim))?,
            norm_gain: store.add(alloc::format!("{name}.norm_gain"), Tensor::filled(1, out_dim, 1.0))?,
            norm_bias: store.add(alloc::format!("{name}.norm_bias"), Tensor::zeros(1, out_dim))?,
            dropout,
        })
    }

    pub fn load(store: &ParamStore, name: &str, dropout: f64) -> Result<Self> {
        Ok(Self {
            weight: store.require(&alloc::format!("{name}.weight"))?,
            bias: store.require(&alloc::format!("{name}.bias"))?,
            norm_gain: store.require(&alloc::format!("{name}.norm_gain"))?,
            norm_bias: store.require(&alloc::format!("{name}.norm_bias"))?,
            dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        let h = tape.gelu(h);
        let g = tape.param(store, self.norm_gain);
        let nb = tape.param(store, self.norm_bias);
        let h = tape.layer_norm(h, g, nb, LAYER_NORM_EPS)?;
        dropout(tape, h, self.dropout, mode)
    }
}

/// Inverted dropout: keeps each unit with probability `1 - rate`, scaling by `1 / (1 - rate)`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..tape.value(x).len())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.mask(x, mask)
        }
        _ => Ok(x),
    }
}

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let std = libm::sqrt(2.0 / (rows + cols) as f64);
    gaussian(rows, cols, std, rng)
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("positive shape")
}

/// Parameter handles of the two-tower encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub query_table: ParamId,
    pub product_table: ParamId,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub query_text: Projector,
    pub query_image: Projector,
    pub product_text: Projector,
    pub product_image: Projector,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub image_raw_dim: usize,
    pub d: usize,
}

/// Batched encoder outputs on a tape; each `Var` has one row per input.
#[derive(Debug, Clone, Copy)]
pub struct TowerVars {
    pub text: Var,
    pub image: Var,
    pub concat: Var,
}

/// Eval-mode query encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuery {
    pub text_half: Embedding,
    pub image_half: Embedding,
    pub concat: Embedding,
    /// Per-token projections into the text space (pre-pooling).
    pub token_features: Vec<Embedding>,
    /// Per-token projections into the image space, used against image features.
    pub token_image_features: Vec<Embedding>,
}

/// Eval-mode product encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedProduct {
    pub text_half: Embedding,
    pub image_half: Embedding,
    pub concat: Embedding,
    pub text_features: Vec<Embedding>,
    pub image_features: Vec<Embedding>,
}

pub const QUERY_TABLE: &str = "encoder.query_table";
pub const PRODUCT_TABLE: &str = "encoder.product_table";
pub const PATCH_WEIGHT: &str = "encoder.patch.weight";
pub const PATCH_BIAS: &str = "encoder.patch.bias";

impl Encoders {
    /// Initializes all encoder parameters. Both token tables start from the
    /// same draw, standing in for a shared pre-trained text backbone.
    pub fn create(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let table = gaussian(cfg.vocab_size, cfg.token_dim, 1.0 / libm::sqrt(cfg.token_dim as f64), rng);
        let query_table = store.add(QUERY_TABLE, table.clone())?;
        let product_table = store.add(PRODUCT_TABLE, table)?;
        let patch_weight = store.add(PATCH_WEIGHT, xavier(cfg.image_raw_dim, cfg.token_dim, rng))?;
        let patch_bias = store.add(PATCH_BIAS, Tensor::zeros(1, cfg.token_dim))?;
        let mut proj = |store: &mut ParamStore, name: &str| {
            Projector::create(store, name, cfg.token_dim, cfg.d, cfg.dropout, rng)
        };
        let query_text = proj(store, "proj.query_text")?;
        let query_image = proj(store, "proj.query_image")?;
        let product_text = proj(store, "proj.product_text")?;
        let product_image = proj(store, "proj.product_image")?;
        Ok(Self {
            query_table,
            product_table,
            patch_weight,
            patch_bias,
            query_text,
            query_image,
            product_text,
            product_image,
            vocab_size: cfg.vocab_size,
            token_dim: cfg.token_dim,
            image_raw_dim: cfg.image_raw_dim,
            d: cfg.d,
        })
    }

    pub fn load(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let enc = Self {
            query_table: store.require(QUERY_TABLE)?,
            product_table: store.require(PRODUCT_TABLE)?,
            patch_weight: store.require(PATCH_WEIGHT)?,
            patch_bias: store.require(PATCH_BIAS)?,
            query_text: Projector::load(store, "proj.query_text", cfg.dropout)?,
            query_image: Projector::load(store, "proj.query_image", cfg.dropout)?,
            product_text: Projector::load(store, "proj.product_text", cfg.dropout)?,
            product_image: Projector::load(store, "proj.product_image", cfg.dropout)?,
            vocab_size: cfg.vocab_size,
            token_dim: cfg.token_dim,
            image_raw_dim: cfg.image_raw_dim,
            d: cfg.d,
        };
        let table = store.value(enc.query_table);
        if table.shape() != [cfg.vocab_size, cfg.token_dim] {
            return Err(Error::Format(alloc::format!(
                "query table shape {:?} does not match config {}x{}",
                table.shape(),
                cfg.vocab_size,
                cfg.token_dim
            )));
        }
        if store.value(enc.query_text.weight).cols() != cfg.d {
            return Err(Error::dim("projector output", cfg.d, store.value(enc.query_text.weight).cols()));
        }
        Ok(enc)
    }

    /// Token rows for a batch of texts, stacked, plus the per-text row counts.
    fn token_rows(&self, tape: &mut Tape, store: &ParamStore, table: ParamId, texts: &[&TextInput]) -> Result<(Var, Vec<usize>)> {
        let mut parts = Vec::with_capacity(texts.len());
        let mut counts = Vec::with_capacity(texts.len());
        for t in texts {
            let v = match t {
                TextInput::Tokens(seq) => {
                    if seq.is_empty() {
                        return Err(Error::EmptyInput);
                    }
                    if let Some(bad) = seq.tokens.iter().find(|&&id| id >= self.vocab_size) {
                        return Err(Error::Contract(alloc::format!(
                            "token id {bad} outside vocabulary of {}",
                            self.vocab_size
                        )));
                    }
                    tape.gather(store, table, &seq.tokens)?
                }
                TextInput::Vectors(rows) => {
                    if rows.cols() != self.token_dim {
                        return Err(Error::dim("precomputed token vectors", self.token_dim, rows.cols()));
                    }
                    tape.constant(rows.clone())
                }
            };
            counts.push(tape.value(v).rows());
            parts.push(v);
        }
        Ok((tape.concat_rows(&parts)?, counts))
    }

    /// `[text ; image]` re-normalized.
    fn join(tape: &mut Tape, text: Var, image: Var) -> Result<Var> {
        let c = tape.concat_cols(&[text, image])?;
        Ok(tape.normalize_rows(c))
    }

    /// Queries: mean-pool token embeddings, project into both halves.
    pub fn queries(&self, tape: &mut Tape, store: &ParamStore, texts: &[&TextInput], mode: &mut Mode<'_>) -> Result<TowerVars> {
        let (rows, counts) = self.token_rows(tape, store, self.query_table, texts)?;
        let pooled = segment_mean(tape, rows, &counts)?;
        let text = self.query_text.forward(tape, store, pooled, mode)?;
        let text = tape.normalize_rows(text);
        let image = self.query_image.forward(tape, store, pooled, mode)?;
        let image = tape.normalize_rows(image);
        let concat = Self::join(tape, text, image)?;
        Ok(TowerVars { text, image, concat })
    }

    /// Products: titles mirror the query path; patches are embedded and
    /// projected one by one, then mean-pooled.
    pub fn products(&self, tape: &mut Tape, store: &ParamStore, items: &[&ProductInput], mode: &mut Mode<'_>) -> Result<TowerVars> {
        let titles: Vec<&TextInput> = items.iter().map(|p| &p.title).collect();
        let (rows, counts) = self.token_rows(tape, store, self.product_table, &titles)?;
        let pooled = segment_mean(tape, rows, &counts)?;
        let text = self.product_text.forward(tape, store, pooled, mode)?;
        let text = tape.normalize_rows(text);

        let patch_proj = self.patch_projections(tape, store, items, mode)?;
        let patch_counts: Vec<usize> = items.iter().map(|p| p.image.num_patches()).collect();
        let image = segment_mean(tape, patch_proj, &patch_counts)?;
        let image = tape.normalize_rows(image);
        let concat = Self::join(tape, text, image)?;
        Ok(TowerVars { text, image, concat })
    }

    fn patch_projections(&self, tape: &mut Tape, store: &ParamStore, items: &[&ProductInput], mode: &mut Mode<'_>) -> Result<Var> {
        let mut parts = Vec::with_capacity(items.len());
        for p in items {
            if p.image.num_patches() == 0 {
                return Err(Error::EmptyInput);
            }
            if p.image.patches.cols() != self.image_raw_dim {
                return Err(Error::dim("patch features", self.image_raw_dim, p.image.patches.cols()));
            }
            parts.push(tape.constant(p.image.patches.clone()));
        }
        let raw = tape.concat_rows(&parts)?;
        let w = tape.param(store, self.patch_weight);
        let b = tape.param(store, self.patch_bias);
        let h = tape.matmul(raw, w)?;
        let h = tape.add_row(h, b)?;
        self.product_image.forward(tape, store, h, mode)
    }

    pub fn encode_query(&self, store: &ParamStore, text: &TextInput) -> Result<EncodedQuery> {
        let mut tape = Tape::new();
        let mut mode = Mode::Eval;
        let tower = self.queries(&mut tape, store, &[text], &mut mode)?;
        let (rows, _) = self.token_rows(&mut tape, store, self.query_table, &[text])?;
        let tok_text = self.query_text.forward(&mut tape, store, rows, &mut mode)?;
        let tok_image = self.query_image.forward(&mut tape, store, rows, &mut mode)?;
        Ok(EncodedQuery {
            text_half: Embedding::new(tape.value(tower.text).data().to_vec(), Space::QueryText)?,
            image_half: Embedding::new(tape.value(tower.image).data().to_vec(), Space::QueryImage)?,
            concat: Embedding::new(tape.value(tower.concat).data().to_vec(), Space::Concatenated)?,
            token_features: embeddings(tape.value(tok_text), Space::QueryText)?,
            token_image_features: embeddings(tape.value(tok_image), Space::QueryImage)?,
        })
    }

    pub fn encode_product(&self, store: &ParamStore, product: &ProductInput) -> Result<EncodedProduct> {
        let mut tape = Tape::new();
        let mut mode = Mode::Eval;
        let tower = self.products(&mut tape, store, &[product], &mut mode)?;
        let (rows, _) = self.token_rows(&mut tape, store, self.product_table, &[&product.title])?;
        let tok = self.product_text.forward(&mut tape, store, rows, &mut mode)?;
        let patches = self.patch_projections(&mut tape, store, &[product], &mut mode)?;
        Ok(EncodedProduct {
            text_half: Embedding::new(tape.value(tower.text).data().to_vec(), Space::ProductText)?,
            image_half: Embedding::new(tape.value(tower.image).data().to_vec(), Space::ProductImage)?,
            concat: Embedding::new(tape.value(tower.concat).data().to_vec(), Space::Concatenated)?,
            text_features: embeddings(tape.value(tok), Space::ProductText)?,
            image_features: embeddings(tape.value(patches), Space::ProductImage)?,
        })
    }

    /// Concatenated embeddings of many products, encoded in chunks.
    pub fn product_concats(&self, store: &ParamStore, items: &[&ProductInput]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(256) {
            let mut tape = Tape::new();
            let tower = self.products(&mut tape, store, chunk, &mut Mode::Eval)?;
            out.extend(tape.value(tower.concat).iter_rows().map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Concatenated embeddings of many queries, encoded in chunks.
    pub fn query_concats(&self, store: &ParamStore, texts: &[&TextInput]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(256) {
            let mut tape = Tape::new();
            let tower = self.queries(&mut tape, store, chunk, &mut Mode::Eval)?;
            out.extend(tape.value(tower.concat).iter_rows().map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

fn embeddings(t: &Tensor, space: Space) -> Result<Vec<Embedding>> {
    t.iter_rows().map(|r| Embedding::new(r.to_vec(), space)).collect()
}

/// Means of consecutive row segments of sizes `counts`, via a constant pooling matrix.
pub fn segment_mean(tape: &mut Tape, rows: Var, counts: &[usize]) -> Result<Var> {
    let total: usize = counts.iter().sum();
    if total != tape.value(rows).rows() {
        return Err(Error::dim("segment mean", tape.value(rows).rows(), total));
    }
    if counts.iter().all(|&c| c == 1) {
        return Ok(rows);
    }
    let mut pool = Tensor::zeros(counts.len(), total);
    let mut off = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyInput);
        }
        let inv = 1.0 / c as f64;
        pool.row_mut(i)[off..off + c].iter_mut().for_each(|x| *x = inv);
        off += c;
    }
    let p = tape.constant(pool);
    tape.matmul(p, rows)
}
