//! Stage 2: train the pseudo-product decoder on top of frozen stage-1 encoders.
//!
//! The loss per batch is a pairwise preference term (target over an
//! intent-cluster negative, summed) plus `kl_weight` times the mean KL
//! divergence between the pseudo-product and query similarity profiles.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::codebook::ClusterMap;
use crate::config::{PmlForm, Stage2Config};
use crate::decoder::{DecoderInit, DecoderInput};
use crate::diff::{self, AdamW, PlateauSchedule, Tape, Tensor, Var};
use crate::eval::{evaluate, EvalQuery};
use crate::features::FeatureStore;
use crate::model::{Catalog, Model, Stage};
use crate::retrieval::{Pipeline, ProductIndex, SearchMode};
use crate::rng::{self, Rng};
use crate::stage1::TrainingPair;
use crate::{Error, ProductId, Result};

/// Preference loss summed over rows of `pseudo`, `target` and `negative` (all `n × 2d`).
///
/// Sigmoid form: `softplus(ŷ·neg - ŷ·target)`. Literal form: `ŷ·neg - ŷ·target`.
pub fn pml_loss(tape: &mut Tape, pseudo: Var, target: Var, negative: Var, form: PmlForm) -> Result<Var> {
    let pt = tape.mul(pseudo, target)?;
    let pn = tape.mul(pseudo, negative)?;
    let st = tape.sum_cols(pt);
    let sn = tape.sum_cols(pn);
    let margin = tape.sub(sn, st)?;
    let per_row = match form {
        PmlForm::Sigmoid => tape.softplus(margin),
        PmlForm::Literal => margin,
    };
    Ok(tape.sum(per_row))
}

/// Scalar preference loss for one triple; refuses a negative equal to the target.
pub fn pml_value(pseudo: &[f64], target: (ProductId, &[f64]), negative: (ProductId, &[f64]), form: PmlForm) -> Result<f64> {
    if target.0 == negative.0 {
        return Err(Error::Contract(format!("negative {} equals the target", negative.0)));
    }
    if pseudo.len() != target.1.len() || pseudo.len() != negative.1.len() {
        return Err(Error::dim("preference triple", pseudo.len(), target.1.len().max(negative.1.len())));
    }
    let margin = diff::dot(pseudo, negative.1) - diff::dot(pseudo, target.1);
    Ok(match form {
        PmlForm::Sigmoid => diff::softplus(margin),
        PmlForm::Literal => margin,
    })
}

/// Mean over rows of `KL(P ‖ Q)` with `P = softmax(ŷ Yᵀ)` and `Q = softmax(X Yᵀ)`.
///
/// `queries` and `products` are treated as constants.
pub fn kl_alignment(tape: &mut Tape, pseudo: Var, queries: &Tensor, products: &Tensor) -> Result<Var> {
    let b = tape.value(pseudo).rows();
    if b < 2 {
        return Err(Error::Contract(format!("KL alignment needs a batch of at least 2, got {b}")));
    }
    if queries.shape() != tape.value(pseudo).shape() || products.shape() != queries.shape() {
        return Err(Error::dim("KL alignment batch", b, queries.rows().min(products.rows())));
    }
    let y = tape.constant(products.clone());
    let sims = tape.matmul_bt(pseudo, y)?;
    let log_p = tape.log_softmax_rows(sims);
    let p = tape.exp(log_p);
    let mut log_q = Vec::with_capacity(b * b);
    for x in queries.iter_rows() {
        let row: Vec<f64> = products.iter_rows().map(|yb| diff::dot(x, yb)).collect();
        log_q.extend(diff::log_softmax(&row));
    }
    let log_q = tape.constant(Tensor::new(b, b, log_q)?);
    let gap = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, gap)?;
    let s = tape.sum(terms);
    Ok(tape.scale(s, 1.0 / b as f64))
}

/// Scalar version of [`kl_alignment`] on plain matrices.
pub fn kl_alignment_value(pseudo: &Tensor, queries: &Tensor, products: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pseudo.clone());
    let v = kl_alignment(&mut tape, p, queries, products)?;
    Ok(tape.value(v).item())
}

/// Uniform draw from the target's intent cluster, excluding the target; falls
/// back to a uniform draw over the whole catalog when the cluster has no
/// other member.
pub fn sample_negative(target: ProductId, clusters: &ClusterMap, rng: &mut Rng) -> Result<ProductId> {
    if clusters.len() < 2 {
        return Err(Error::State(format!(
            "cannot sample a negative from a catalog of {} product(s)",
            clusters.len()
        )));
    }
    let cluster = clusters
        .cluster_of(target)
        .ok_or_else(|| Error::Data(format!("product {target} has no intent cluster")))?;
    let members = clusters.members(cluster);
    if members.len() >= 2 {
        let i = rng.random_range(0..members.len() - 1);
        let pick = members[i];
        return Ok(if pick == target { members[members.len() - 1] } else { pick });
    }
    let all: Vec<ProductId> = clusters.product_ids().collect();
    let i = rng.random_range(0..all.len() - 1);
    let pick = all[i];
    Ok(if pick == target { all[all.len() - 1] } else { pick })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stage2EpochMetrics {
    pub epoch: usize,
    #[cfg_attr(feature = "serde", serde(rename = "PML"))]
    pub pml: f64,
    #[cfg_attr(feature = "serde", serde(rename = "KL"))]
    pub kl: f64,
    /// Validation SumR (percent) after this epoch, full-scan retrieval.
    pub val_sum_r: Option<f64>,
    pub lr: f64,
}

/// Decoder inputs computed once with the frozen encoders.
struct Prepared {
    input: DecoderInput,
    target: ProductId,
}

/// Frozen quantities shared by stage-2 training and validation.
pub struct Stage2Context {
    pub product_vectors: Vec<(ProductId, Vec<f64>)>,
    pub clusters: ClusterMap,
    pub index: ProductIndex,
}

impl Stage2Context {
    pub fn build(model: &Model, catalog: &Catalog) -> Result<Self> {
        let product_vectors = model.product_embeddings(catalog)?;
        let cb = model.intent_codebook();
        let clusters = cb.assign_clusters(product_vectors.iter().map(|(id, v)| (*id, v.as_slice())))?;
        let index = ProductIndex::new(product_vectors.clone())?;
        Ok(Self {
            product_vectors,
            clusters,
            index,
        })
    }

    fn vector(&self, catalog: &Catalog, id: ProductId) -> Result<&[f64]> {
        let pos = catalog
            .position(id)
            .ok_or_else(|| Error::Data(format!("product {id} is not in the catalog")))?;
        Ok(&self.product_vectors[pos].1)
    }
}

fn prepare(model: &Model, features: &FeatureStore, pairs: &[TrainingPair], top_m: usize) -> Result<Vec<Prepared>> {
    let decoder = model.decoder.as_ref().expect("decoder attached");
    let cb = model.intent_codebook();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let enc = model.encoders.encode_query(&model.store, &p.query)?;
        let intent = cb.nearest(enc.concat.values())?;
        let mut seq = features.retrieve_for(&enc, top_m)?.lifted_sequence();
        seq.truncate(decoder.max_slots());
        out.push(Prepared {
            input: DecoderInput {
                query: enc.concat.into_values(),
                intent: cb.vector(intent.index).to_vec(),
                features: seq,
            },
            target: p.product,
        });
    }
    Ok(out)
}

/// Validation SumR of the current model (full scan).
pub fn validation_sum_r(model: &Model, features: &FeatureStore, index: &ProductIndex, val: &[EvalQuery], top_m: usize) -> Result<f64> {
    let pipeline = Pipeline {
        model,
        features: Some(features),
        top_m,
    };
    Ok(evaluate(&pipeline, index, val, SearchMode::Full, 1)?.report.sum_r)
}

/// Attaches and trains the decoder; every stage-1 parameter stays frozen.
pub fn train_stage2(
    model: &mut Model,
    catalog: &Catalog,
    features: &FeatureStore,
    train: &[TrainingPair],
    val: &[EvalQuery],
    cfg: &Stage2Config,
) -> Result<Vec<Stage2EpochMetrics>> {
    cfg.validate()?;
    if model.stage() != Stage::One {
        return Err(Error::State("stage 2 training needs a stage-1 model without a decoder".into()));
    }
    if train.len() < 2 {
        return Err(Error::Data(format!("stage 2 needs at least 2 training pairs, got {}", train.len())));
    }
    features.check_dim(model.config.d)?;
    let ctx = Stage2Context::build(model, catalog)?;
    if ctx.clusters.len() < 2 {
        return Err(Error::State("stage 2 needs a catalog of at least 2 products".into()));
    }
    model.attach_decoder(DecoderInit::Residual)?;
    model.freeze_stage1();
    let prepared = prepare(model, features, train, cfg.top_m_features)?;
    let decoder = model.decoder.clone().expect("just attached");

    let mut shuffle_rng = rng::derive(cfg.seed, rng::stream::STAGE2_SHUFFLE);
    let mut neg_rng = rng::derive(cfg.seed, rng::stream::NEGATIVES);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut schedule = PlateauSchedule::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut tape = Tape::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let w = model.config.concat_dim();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut pml_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            tape.reset();
            let mut outs = Vec::with_capacity(idx.len());
            for &i in idx {
                outs.push(decoder.forward(&mut tape, &model.store, &prepared[i].input)?.output);
            }
            let pseudo = tape.concat_rows(&outs)?;
            let b = idx.len();
            let m = cfg.negatives;
            let mut targets = Tensor::zeros(b, w);
            let mut queries = Tensor::zeros(b, w);
            let mut pos_rows = Tensor::zeros(b * m, w);
            let mut neg_rows = Tensor::zeros(b * m, w);
            let mut repeat = Vec::with_capacity(b * m);
            for (r, &i) in idx.iter().enumerate() {
                let item = &prepared[i];
                let t = ctx.vector(catalog, item.target)?;
                targets.row_mut(r).copy_from_slice(t);
                queries.row_mut(r).copy_from_slice(&item.input.query);
                for j in 0..m {
                    let neg = sample_negative(item.target, &ctx.clusters, &mut neg_rng)?;
                    pos_rows.row_mut(r * m + j).copy_from_slice(t);
                    neg_rows.row_mut(r * m + j).copy_from_slice(ctx.vector(catalog, neg)?);
                    repeat.push(r);
                }
            }
            let rep = if m == 1 { pseudo } else { tape.select_rows(pseudo, &repeat)? };
            let pos = tape.constant(pos_rows);
            let neg = tape.constant(neg_rows);
            let pml = pml_loss(&mut tape, rep, pos, neg, cfg.pml_form)?;
            let kl = kl_alignment(&mut tape, pseudo, &queries, &targets)?;
            let kl_w = tape.scale(kl, cfg.kl_weight);
            let loss = tape.add(pml, kl_w)?;
            let (pv, kv) = (tape.value(pml).item(), tape.value(kl).item());
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Numeric {
                    step,
                    detail: format!(
                        "epoch {epoch}: PML={pv} KL={kv}; targets {:?}",
                        idx.iter().map(|&i| prepared[i].target).collect::<Vec<_>>()
                    ),
                });
            }
            let grads = tape.backward(loss)?;
            if !grads.is_finite() {
                return Err(Error::Numeric {
                    step,
                    detail: format!("epoch {epoch}: non-finite decoder gradient (PML={pv} KL={kv})"),
                });
            }
            opt.step(&mut model.store, &grads);
            pml_sum += pv;
            kl_sum += kv;
            batches += 1;
            step += 1;
        }
        let val_sum_r = if val.is_empty() {
            None
        } else {
            Some(validation_sum_r(model, features, &ctx.index, val, cfg.top_m_features)?)
        };
        let n = batches.max(1) as f64;
        history.push(Stage2EpochMetrics {
            epoch: epoch + 1,
            pml: pml_sum / n,
            kl: kl_sum / n,
            val_sum_r,
            lr: opt.lr,
        });
        opt.lr = schedule.observe((pml_sum + cfg.kl_weight * kl_sum) / n, opt.lr);
    }
    Ok(history)
}

/// Distinct relevant sets keyed by query, built from pairs sharing a query.
pub fn relevance_from_pairs(pairs: &[TrainingPair]) -> Vec<EvalQuery> {
    let mut out: Vec<EvalQuery> = Vec::new();
    for p in pairs {
        match out.iter_mut().find(|q| q.query == p.query) {
            Some(q) => {
                q.relevant.insert(p.product);
            }
            None => out.push(EvalQuery {
                query: p.query.clone(),
                relevant: BTreeSet::from([p.product]),
            }),
        }
    }
    out
}
