//! Stage 1: two-tower contrastive alignment plus competitive learning of the
//! intent codebook.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::codebook::{nearest_in, rcl_loss, rcl_loss_routed, PairRouting, RclOutput};
use crate::config::Stage1Config;
use crate::diff::{AdamW, PlateauSchedule, Tape, Tensor, Var};
use crate::encoders::{Mode, ProductInput, TextInput, TowerVars};
use crate::model::{Catalog, Model};
use crate::rng;
use crate::{Error, ProductId, Result};

/// One observed (query, purchased product) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub query: TextInput,
    pub product: ProductId,
}

/// InfoNCE over in-batch negatives, summed over the batch:
/// `-Σ_n log softmax_b(x_n·y_b / T)[n]`.
///
/// With `symmetric` the product→query direction is added and the two are averaged.
pub fn contrastive_loss(tape: &mut Tape, x: Var, y: Var, temperature: f64, symmetric: bool) -> Result<Var> {
    let (xs, ys) = (tape.value(x), tape.value(y));
    if xs.shape() != ys.shape() {
        return Err(Error::dim("contrastive batch", xs.rows(), ys.rows()));
    }
    let b = xs.rows();
    if b < 2 {
        return Err(Error::Contract(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let eye = Tensor::identity(b).into_data();
    let sims = tape.matmul_bt(x, y)?;
    let logits = tape.scale(sims, 1.0 / temperature);
    let one_way = |tape: &mut Tape, logits: Var| -> Result<Var> {
        let ls = tape.log_softmax_rows(logits);
        let diag = tape.mask(ls, eye.clone())?;
        let s = tape.sum(diag);
        Ok(tape.scale(s, -1.0))
    };
    let forward = one_way(tape, logits)?;
    if !symmetric {
        return Ok(forward);
    }
    let lt = tape.transpose(logits);
    let backward = one_way(tape, lt)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5))
}

/// Recorded components of the combined stage-1 loss.
#[derive(Debug, Clone)]
pub struct Stage1Losses {
    pub total: Var,
    pub l_qp: Var,
    pub l_qpt: Var,
    pub l_qpi: Var,
    pub rcl: RclOutput,
}

/// `λ L_qp + (1 - λ)(L_qpt + L_qpi) + w · RCL`.
pub fn stage1_loss(tape: &mut Tape, q: &TowerVars, p: &TowerVars, codebook: Var, cfg: &Stage1Config) -> Result<Stage1Losses> {
    let (l_qp, l_qpt, l_qpi) = contrastive_terms(tape, q, p, cfg)?;
    let rcl = rcl_loss(tape, q.concat, p.concat, codebook, cfg.rcl_literal)?;
    let total = combine(tape, l_qp, l_qpt, l_qpi, rcl.loss, cfg)?;
    Ok(Stage1Losses {
        total,
        l_qp,
        l_qpt,
        l_qpi,
        rcl,
    })
}

/// The combined loss for a fixed intent routing (see [`rcl_loss_routed`]).
pub fn stage1_loss_routed(tape: &mut Tape, q: &TowerVars, p: &TowerVars, codebook: Var, cfg: &Stage1Config, routing: &[PairRouting]) -> Result<Var> {
    let (l_qp, l_qpt, l_qpi) = contrastive_terms(tape, q, p, cfg)?;
    let rcl = rcl_loss_routed(tape, q.concat, p.concat, codebook, routing)?;
    combine(tape, l_qp, l_qpt, l_qpi, rcl, cfg)
}

fn contrastive_terms(tape: &mut Tape, q: &TowerVars, p: &TowerVars, cfg: &Stage1Config) -> Result<(Var, Var, Var)> {
    let t = cfg.temperature;
    let l_qp = contrastive_loss(tape, q.concat, p.concat, t, cfg.symmetric_contrastive)?;
    let l_qpt = contrastive_loss(tape, q.text, p.text, t, cfg.symmetric_contrastive)?;
    let l_qpi = contrastive_loss(tape, q.image, p.image, t, cfg.symmetric_contrastive)?;
    Ok((l_qp, l_qpt, l_qpi))
}

fn combine(tape: &mut Tape, l_qp: Var, l_qpt: Var, l_qpi: Var, rcl: Var, cfg: &Stage1Config) -> Result<Var> {
    let a = tape.scale(l_qp, cfg.lambda);
    let halves = tape.add(l_qpt, l_qpi)?;
    let b = tape.scale(halves, 1.0 - cfg.lambda);
    let c = tape.scale(rcl, cfg.rcl_weight);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stage1EpochMetrics {
    pub epoch: usize,
    #[cfg_attr(feature = "serde", serde(rename = "L_qp"))]
    pub l_qp: f64,
    #[cfg_attr(feature = "serde", serde(rename = "L_qpt"))]
    pub l_qpt: f64,
    #[cfg_attr(feature = "serde", serde(rename = "L_qpi"))]
    pub l_qpi: f64,
    #[cfg_attr(feature = "serde", serde(rename = "RCL"))]
    pub rcl: f64,
    pub total: f64,
    /// Fraction of training pairs whose query and product picked the same intent.
    pub match_rate: f64,
    pub val_loss: Option<f64>,
    pub val_match_rate: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Default)]
struct Totals {
    l_qp: f64,
    l_qpt: f64,
    l_qpi: f64,
    rcl: f64,
    total: f64,
    matches: usize,
    pairs: usize,
    batches: usize,
}

impl Totals {
    fn add(&mut self, tape: &Tape, l: &Stage1Losses) {
        self.l_qp += tape.value(l.l_qp).item();
        self.l_qpt += tape.value(l.l_qpt).item();
        self.l_qpi += tape.value(l.l_qpi).item();
        self.rcl += tape.value(l.rcl.loss).item();
        self.total += tape.value(l.total).item();
        self.matches += l.rcl.matches();
        self.pairs += l.rcl.routing.len();
        self.batches += 1;
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.batches.max(1) as f64
    }
}

/// Splits `n` items into batches of `size`; a trailing batch of one is dropped.
fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|c| c.len() >= 2)
}

fn forward_batch(
    tape: &mut Tape,
    model: &Model,
    catalog: &Catalog,
    pairs: &[TrainingPair],
    idx: &[usize],
    cfg: &Stage1Config,
    mode: &mut Mode<'_>,
) -> Result<Stage1Losses> {
    let queries: Vec<&TextInput> = idx.iter().map(|&i| &pairs[i].query).collect();
    let products = idx
        .iter()
        .map(|&i| catalog.require(pairs[i].product))
        .collect::<Result<Vec<&ProductInput>>>()?;
    let q = model.encoders.queries(tape, &model.store, &queries, mode)?;
    let p = model.encoders.products(tape, &model.store, &products, mode)?;
    let cb = tape.param(&model.store, model.codebook);
    stage1_loss(tape, &q, &p, cb, cfg)
}

fn batch_dump(epoch: usize, batch: usize, pairs: &[TrainingPair], idx: &[usize], tape: &Tape, l: &Stage1Losses) -> String {
    let mut s = format!(
        "epoch {epoch} batch {batch}: L_qp={} L_qpt={} L_qpi={} RCL={}; pairs:",
        tape.value(l.l_qp).item(),
        tape.value(l.l_qpt).item(),
        tape.value(l.l_qpi).item(),
        tape.value(l.rcl.loss).item()
    );
    for &i in idx {
        let q = match &pairs[i].query {
            TextInput::Tokens(t) => format!("{:?}", t.tokens),
            TextInput::Vectors(v) => format!("<{} vectors>", v.rows()),
        };
        let _ = write!(s, " [{i}: query {q} -> product {}]", pairs[i].product);
    }
    s
}

/// Trains encoders, projectors and the codebook in place.
///
/// Returns one metrics record per epoch. With `epochs = 0` the model is untouched.
pub fn train_stage1(model: &mut Model, catalog: &Catalog, train: &[TrainingPair], val: &[TrainingPair], cfg: &Stage1Config) -> Result<Vec<Stage1EpochMetrics>> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Data(format!("stage 1 needs at least 2 training pairs, got {}", train.len())));
    }
    if model.decoder.is_some() {
        return Err(Error::State("stage 1 training expects a model without a decoder".into()));
    }
    let mut shuffle_rng = rng::derive(cfg.seed, rng::stream::STAGE1_SHUFFLE);
    let mut dropout_rng = rng::derive(cfg.seed, rng::stream::STAGE1_DROPOUT);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut schedule = PlateauSchedule::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut tape = Tape::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut totals = Totals::default();
        for (bi, idx) in batches(&order, cfg.batch_size).enumerate() {
            tape.reset();
            let losses = forward_batch(&mut tape, model, catalog, train, idx, cfg, &mut Mode::Train(&mut dropout_rng))?;
            let total = tape.value(losses.total).item();
            if !total.is_finite() {
                return Err(Error::Numeric {
                    step,
                    detail: batch_dump(epoch, bi, train, idx, &tape, &losses),
                });
            }
            let grads = tape.backward(losses.total)?;
            if !grads.is_finite() {
                return Err(Error::Numeric {
                    step,
                    detail: format!("non-finite gradient; {}", batch_dump(epoch, bi, train, idx, &tape, &losses)),
                });
            }
            totals.add(&tape, &losses);
            opt.step(&mut model.store, &grads);
            model.renormalize_codebook();
            model.codebook_steps += 1;
            step += 1;
        }

        let (val_loss, val_match_rate) = if val.len() >= 2 {
            let vt = validation_totals(model, catalog, val, cfg)?;
            (Some(vt.mean(vt.total)), Some(intent_match_rate(model, catalog, val)?))
        } else {
            (None, None)
        };
        let lr = opt.lr;
        history.push(Stage1EpochMetrics {
            epoch: epoch + 1,
            l_qp: totals.mean(totals.l_qp),
            l_qpt: totals.mean(totals.l_qpt),
            l_qpi: totals.mean(totals.l_qpi),
            rcl: totals.mean(totals.rcl),
            total: totals.mean(totals.total),
            match_rate: totals.matches as f64 / totals.pairs.max(1) as f64,
            val_loss,
            val_match_rate,
            lr,
        });
        opt.lr = schedule.observe(val_loss.unwrap_or(totals.mean(totals.total)), opt.lr);
    }
    Ok(history)
}

fn validation_totals(model: &Model, catalog: &Catalog, val: &[TrainingPair], cfg: &Stage1Config) -> Result<Totals> {
    let order: Vec<usize> = (0..val.len()).collect();
    let mut totals = Totals::default();
    let mut tape = Tape::new();
    for idx in batches(&order, cfg.batch_size) {
        tape.reset();
        let l = forward_batch(&mut tape, model, catalog, val, idx, cfg, &mut Mode::Eval)?;
        totals.add(&tape, &l);
    }
    Ok(totals)
}

/// Eval-mode combined loss averaged over consecutive batches of `pairs`.
pub fn evaluate_loss(model: &Model, catalog: &Catalog, pairs: &[TrainingPair], cfg: &Stage1Config) -> Result<f64> {
    let t = validation_totals(model, catalog, pairs, cfg)?;
    if t.batches == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(t.mean(t.total))
}

/// Fraction of pairs whose query and product embeddings select the same intent.
pub fn intent_match_rate(model: &Model, catalog: &Catalog, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let queries: Vec<&TextInput> = pairs.iter().map(|p| &p.query).collect();
    let products = pairs
        .iter()
        .map(|p| catalog.require(p.product))
        .collect::<Result<Vec<&ProductInput>>>()?;
    let qv = model.encoders.query_concats(&model.store, &queries)?;
    let pv = model.encoders.product_concats(&model.store, &products)?;
    let cb = model.store.value(model.codebook);
    let mut hits = 0usize;
    for (q, p) in qv.iter().zip(&pv) {
        if nearest_in(cb, q)?.index == nearest_in(cb, p)?.index {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}
