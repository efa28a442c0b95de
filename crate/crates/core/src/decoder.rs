//! Pseudo-product decoder.
//!
//! The input sequence is `[intent, f_1, …, f_m, L_v]` where each retrieved
//! feature is lifted to the concatenated width (text features fill the
//! first half, image features the second) and offset by a learned slot
//! embedding. Each layer applies causal self-attention, cross-attention
//! onto the query embedding and a GELU feed-forward block, all pre-norm
//! with residual connections. The output at the `L_v` position,
//! normalized, is the pseudo product.
//!
//! The default initialization zeroes every residual branch except the
//! cross-attention value path, which starts as the identity: an untrained
//! decoder returns (almost exactly) the normalized query embedding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoders::{gaussian, xavier, Embedding};
use crate::rng::Rng;
use crate::{Error, ProductId, Result};

const EPS: f64 = 1e-5;
const BIAS_VECTOR_STD: f64 = 1e-6;
const SLOT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderInit {
    /// Residual-identity start (see module docs).
    Residual,
    /// Every weight drawn at random; used to exercise all gradient paths.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Attention {
    heads: Vec<Head>,
    wo: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    ln1: (ParamId, ParamId),
    self_attn: Attention,
    ln2: (ParamId, ParamId),
    cross_attn: Attention,
    ln3: (ParamId, ParamId),
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

/// Parameter handles of the decoder plus the learnable bias vector `L_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    width: usize,
    layers: Vec<Layer>,
    pub bias_vector: ParamId,
    pub slots: ParamId,
    max_slots: usize,
}

/// Decoder inputs for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInput {
    /// Query embedding in the concatenated space (cross-attention context).
    pub query: Vec<f64>,
    /// Selected intent vector.
    pub intent: Vec<f64>,
    /// Retrieved features already lifted to the concatenated width, in sequence order.
    pub features: Vec<Vec<f64>>,
}

/// Recorded decoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct DecoderTrace {
    /// `1 × 2d`, unit norm.
    pub output: Var,
    /// Residual stream after the first self-attention block (`seq × 2d`).
    pub self_attention: Var,
}

/// Decoder output with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoProduct {
    pub embedding: Embedding,
    pub intent: usize,
    /// `(product, feature index)` of each retrieved text and image feature used.
    pub text_features: Vec<(ProductId, usize)>,
    pub image_features: Vec<(ProductId, usize)>,
    /// True when no decoder was available and the query embedding was used as-is.
    pub fallback: bool,
}

/// Places a `d`-wide text feature in the first half of a `2d` vector.
pub fn lift_text(f: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; 2 * f.len()];
    v[..f.len()].copy_from_slice(f);
    v
}

/// Places a `d`-wide image feature in the second half of a `2d` vector.
pub fn lift_image(f: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; 2 * f.len()];
    v[f.len()..].copy_from_slice(f);
    v
}

fn identity_columns(width: usize, start: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(width, cols);
    for c in 0..cols {
        t.row_mut(start + c)[c] = 1.0;
    }
    t
}

impl Decoder {
    pub fn create(store: &mut ParamStore, cfg: &ModelConfig, layers: usize, heads: usize, init: DecoderInit, rng: &mut Rng) -> Result<Self> {
        let w = cfg.concat_dim();
        if layers == 0 || heads == 0 || w % heads != 0 {
            return Err(Error::Config(format!(
                "decoder needs layers >= 1 and heads dividing {w}; got {layers} layers, {heads} heads"
            )));
        }
        let dh = w / heads;
        let hidden = cfg.decoder_ff_mult * w;
        let random = init == DecoderInit::Random;
        let ln = |store: &mut ParamStore, name: &str, rng: &mut Rng| -> Result<(ParamId, ParamId)> {
            let (g, b) = if random {
                let mut g = gaussian(1, w, 0.1, rng);
                g.data_mut().iter_mut().for_each(|x| *x += 1.0);
                (g, gaussian(1, w, 0.1, rng))
            } else {
                (Tensor::filled(1, w, 1.0), Tensor::zeros(1, w))
            };
            Ok((store.add(format!("{name}.gain"), g)?, store.add(format!("{name}.bias"), b)?))
        };
        let mut out_layers = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("decoder.layer{l}");
            let ln1 = ln(store, &format!("{p}.ln1"), rng)?;
            let mut self_heads = Vec::with_capacity(heads);
            for h in 0..heads {
                self_heads.push(Head {
                    wq: store.add(format!("{p}.self.h{h}.wq"), xavier(w, dh, rng))?,
                    wk: store.add(format!("{p}.self.h{h}.wk"), xavier(w, dh, rng))?,
                    wv: store.add(format!("{p}.self.h{h}.wv"), xavier(w, dh, rng))?,
                });
            }
            let self_wo = if random { xavier(w, w, rng) } else { Tensor::zeros(w, w) };
            let self_attn = Attention {
                heads: self_heads,
                wo: store.add(format!("{p}.self.wo"), self_wo)?,
            };
            let ln2 = ln(store, &format!("{p}.ln2"), rng)?;
            let mut cross_heads = Vec::with_capacity(heads);
            for h in 0..heads {
                let wv = if random { xavier(w, dh, rng) } else { identity_columns(w, h * dh, dh) };
                cross_heads.push(Head {
                    wq: store.add(format!("{p}.cross.h{h}.wq"), xavier(w, dh, rng))?,
                    wk: store.add(format!("{p}.cross.h{h}.wk"), xavier(w, dh, rng))?,
                    wv: store.add(format!("{p}.cross.h{h}.wv"), wv)?,
                });
            }
            let cross_wo = if random { xavier(w, w, rng) } else { Tensor::identity(w) };
            let cross_attn = Attention {
                heads: cross_heads,
                wo: store.add(format!("{p}.cross.wo"), cross_wo)?,
            };
            let ln3 = ln(store, &format!("{p}.ln3"), rng)?;
            let w2 = if random { xavier(hidden, w, rng) } else { Tensor::zeros(hidden, w) };
            let b_init = |rng: &mut Rng, n| if random { gaussian(1, n, 0.1, rng) } else { Tensor::zeros(1, n) };
            let ff_b1 = b_init(rng, hidden);
            let ff_b2 = b_init(rng, w);
            out_layers.push(Layer {
                ln1,
                self_attn,
                ln2,
                cross_attn,
                ln3,
                ff_w1: store.add(format!("{p}.ff.w1"), xavier(w, hidden, rng))?,
                ff_b1: store.add(format!("{p}.ff.b1"), ff_b1)?,
                ff_w2: store.add(format!("{p}.ff.w2"), w2)?,
                ff_b2: store.add(format!("{p}.ff.b2"), ff_b2)?,
            });
        }
        let lv_std = if random { 0.5 } else { BIAS_VECTOR_STD };
        let bias_vector = store.add("decoder.bias_vector", gaussian(1, w, lv_std, rng))?;
        let slot_std = if random { 0.5 } else { SLOT_STD };
        let slots = store.add("decoder.slots", gaussian(cfg.max_feature_slots, w, slot_std, rng))?;
        Ok(Self {
            width: w,
            layers: out_layers,
            bias_vector,
            slots,
            max_slots: cfg.max_feature_slots,
        })
    }

    /// Rebuilds handles from a parameter store written by [`Decoder::create`].
    pub fn load(store: &ParamStore, cfg: &ModelConfig) -> Result<Option<Self>> {
        let Some(bias_vector) = store.find("decoder.bias_vector") else {
            return Ok(None);
        };
        let w = cfg.concat_dim();
        let mut layers = Vec::new();
        for l in 0.. {
            let p = format!("decoder.layer{l}");
            if store.find(&format!("{p}.ln1.gain")).is_none() {
                break;
            }
            let pair = |name: &str| -> Result<(ParamId, ParamId)> {
                Ok((store.require(&format!("{name}.gain"))?, store.require(&format!("{name}.bias"))?))
            };
            let heads_of = |kind: &str| -> Result<Vec<Head>> {
                let mut heads = Vec::new();
                for h in 0.. {
                    let base = format!("{p}.{kind}.h{h}");
                    let Some(wq) = store.find(&format!("{base}.wq")) else { break };
                    heads.push(Head {
                        wq,
                        wk: store.require(&format!("{base}.wk"))?,
                        wv: store.require(&format!("{base}.wv"))?,
                    });
                }
                Ok(heads)
            };
            layers.push(Layer {
                ln1: pair(&format!("{p}.ln1"))?,
                self_attn: Attention {
                    heads: heads_of("self")?,
                    wo: store.require(&format!("{p}.self.wo"))?,
                },
                ln2: pair(&format!("{p}.ln2"))?,
                cross_attn: Attention {
                    heads: heads_of("cross")?,
                    wo: store.require(&format!("{p}.cross.wo"))?,
                },
                ln3: pair(&format!("{p}.ln3"))?,
                ff_w1: store.require(&format!("{p}.ff.w1"))?,
                ff_b1: store.require(&format!("{p}.ff.b1"))?,
                ff_w2: store.require(&format!("{p}.ff.w2"))?,
                ff_b2: store.require(&format!("{p}.ff.b2"))?,
            });
        }
        if layers.is_empty() {
            return Err(Error::Format("decoder bias vector present without layers".into()));
        }
        if store.value(bias_vector).shape() != [1, w] {
            return Err(Error::dim("decoder width", w, store.value(bias_vector).cols()));
        }
        let slots = store.require("decoder.slots")?;
        Ok(Some(Self {
            width: w,
            layers,
            bias_vector,
            slots,
            max_slots: store.value(slots).rows(),
        }))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_slots(&self) -> usize {
        self.max_slots
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Names of every decoder parameter (prefix `decoder.`).
    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("decoder.")
    }

    fn layer_norm(&self, tape: &mut Tape, store: &ParamStore, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
        let g = tape.param(store, p.0);
        let b = tape.param(store, p.1);
        tape.layer_norm(x, g, b, EPS)
    }

    fn attend(&self, tape: &mut Tape, store: &ParamStore, att: &Attention, queries: Var, context: Var, causal: bool) -> Result<Var> {
        let dh = self.width / att.heads.len();
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(att.heads.len());
        for h in &att.heads {
            let (wq, wk, wv) = (tape.param(store, h.wq), tape.param(store, h.wk), tape.param(store, h.wv));
            let q = tape.matmul(queries, wq)?;
            let k = tape.matmul(context, wk)?;
            let v = tape.matmul(context, wv)?;
            let s = tape.matmul_bt(q, k)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s, causal);
            outs.push(tape.matmul(a, v)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let wo = tape.param(store, att.wo);
        tape.matmul(joined, wo)
    }

    /// Records the decoder forward pass for one query.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: &DecoderInput) -> Result<DecoderTrace> {
        let w = self.width;
        for (what, len) in [("decoder query", input.query.len()), ("decoder intent", input.intent.len())] {
            if len != w {
                return Err(Error::dim(what, w, len));
            }
        }
        if input.features.len() > self.max_slots {
            return Err(Error::Contract(format!(
                "{} feature positions exceed the decoder limit of {}",
                input.features.len(),
                self.max_slots
            )));
        }
        let mut parts = vec![tape.constant(Tensor::row_vector(input.intent.clone()))];
        if !input.features.is_empty() {
            if let Some(bad) = input.features.iter().find(|f| f.len() != w) {
                return Err(Error::dim("decoder feature", w, bad.len()));
            }
            let feats = tape.constant(Tensor::from_rows(&input.features)?);
            let slots = tape.param(store, self.slots);
            let idx: Vec<usize> = (0..input.features.len()).collect();
            let pos = tape.select_rows(slots, &idx)?;
            parts.push(tape.add(feats, pos)?);
        }
        parts.push(tape.param(store, self.bias_vector));
        let mut h = tape.concat_rows(&parts)?;
        let seq = tape.value(h).rows();
        let context = tape.constant(Tensor::row_vector(input.query.clone()));

        let mut first_self = None;
        for layer in &self.layers {
            let z = self.layer_norm(tape, store, h, layer.ln1)?;
            let sa = self.attend(tape, store, &layer.self_attn, z, z, true)?;
            h = tape.add(h, sa)?;
            first_self.get_or_insert(h);

            let z = self.layer_norm(tape, store, h, layer.ln2)?;
            let ca = self.attend(tape, store, &layer.cross_attn, z, context, false)?;
            h = tape.add(h, ca)?;

            let z = self.layer_norm(tape, store, h, layer.ln3)?;
            let (w1, b1) = (tape.param(store, layer.ff_w1), tape.param(store, layer.ff_b1));
            let (w2, b2) = (tape.param(store, layer.ff_w2), tape.param(store, layer.ff_b2));
            let f = tape.matmul(z, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, b2)?;
            h = tape.add(h, f)?;
        }
        let last = tape.select_rows(h, &[seq - 1])?;
        Ok(DecoderTrace {
            output: tape.normalize_rows(last),
            self_attention: first_self.expect("at least one layer"),
        })
    }

    /// Eval-mode forward returning the pseudo-product vector.
    pub fn generate(&self, store: &ParamStore, input: &DecoderInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, store, input)?;
        Ok(tape.value(trace.output).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff;
    use crate::rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 4,
            k_intents: 4,
            max_feature_slots: 8,
            ..ModelConfig::default()
        }
    }

    fn unit(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::derive(seed, 99);
        let mut v = gaussian(1, n, 1.0, &mut r).into_data();
        diff::normalize(&mut v);
        v
    }

    fn input(seed: u64, n_feat: usize) -> DecoderInput {
        DecoderInput {
            query: unit(seed, 8),
            intent: unit(seed + 1, 8),
            features: (0..n_feat).map(|i| unit(seed + 10 + i as u64, 8)).collect(),
        }
    }

    fn decoder(init: DecoderInit) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let mut r = rng::derive(3, rng::stream::DECODER);
        let dec = Decoder::create(&mut store, &cfg(), 1, 1, init, &mut r).unwrap();
        (store, dec)
    }

    #[test]
    fn residual_init_reproduces_query_direction() {
        let (store, dec) = decoder(DecoderInit::Residual);
        let inp = input(1, 4);
        let out = dec.generate(&store, &inp).unwrap();
        assert!((diff::l2_norm(&out) - 1.0).abs() < 1e-9);
        assert!(diff::dot(&out, &inp.query) > 0.999);
    }

    #[test]
    fn zero_attention_yields_bias_vector_path() {
        let (mut store, dec) = decoder(DecoderInit::Random);
        let names: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.name.contains(".self.") || p.name.contains(".cross."))
            .map(|(id, _)| id)
            .collect();
        for id in names {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let a = dec.generate(&store, &input(1, 4)).unwrap();
        let b = dec.generate(&store, &input(50, 2)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // residual of L_v alone: L_v + FF(LN(L_v)), normalized
        let layer = &dec.layers[0];
        let mut tape = Tape::new();
        let lv = tape.param(&store, dec.bias_vector);
        let z = dec.layer_norm(&mut tape, &store, lv, layer.ln3).unwrap();
        let (w1, b1) = (tape.param(&store, layer.ff_w1), tape.param(&store, layer.ff_b1));
        let (w2, b2) = (tape.param(&store, layer.ff_w2), tape.param(&store, layer.ff_b2));
        let f = tape.matmul(z, w1).unwrap();
        let f = tape.add_row(f, b1).unwrap();
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2).unwrap();
        let f = tape.add_row(f, b2).unwrap();
        let h = tape.add(lv, f).unwrap();
        let o = tape.normalize_rows(h);
        for (x, y) in a.iter().zip(tape.value(o).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let (store, dec) = decoder(DecoderInit::Random);
        let inp = input(7, 4);
        assert_eq!(dec.generate(&store, &inp).unwrap(), dec.generate(&store, &inp).unwrap());
        let mut swapped = inp.clone();
        swapped.features.swap(0, 2);
        let a = dec.generate(&store, &inp).unwrap();
        let b = dec.generate(&store, &swapped).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn self_attention_is_causal() {
        let (store, dec) = decoder(DecoderInit::Random);
        let inp = input(9, 4);
        let mut tape = Tape::new();
        let base = dec.forward(&mut tape, &store, &inp).unwrap();
        let base_rows = tape.value(base.self_attention).clone();
        // positions: 0 intent, 1..=4 features, 5 bias vector
        for t in 1..4 {
            let mut z = inp.clone();
            for f in z.features.iter_mut().skip(t) {
                f.iter_mut().for_each(|x| *x = 0.0);
            }
            let mut tape2 = Tape::new();
            let tr = dec.forward(&mut tape2, &store, &z).unwrap();
            let rows = tape2.value(tr.self_attention);
            for pos in 0..=t {
                for (a, b) in rows.row(pos).iter().zip(base_rows.row(pos)) {
                    assert!((a - b).abs() < 1e-12, "t={t} pos={pos}");
                }
            }
            assert_ne!(rows.row(t + 1), base_rows.row(t + 1));
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let (store, dec) = decoder(DecoderInit::Residual);
        let mut inp = input(1, 2);
        inp.query.pop();
        assert!(matches!(dec.generate(&store, &inp), Err(Error::Dimension { .. })));
        let too_many = input(1, 9);
        assert!(matches!(dec.generate(&store, &too_many), Err(Error::Contract(_))));
    }

    #[test]
    fn reload_by_name() {
        let mut store = ParamStore::new();
        let mut r = rng::derive(3, rng::stream::DECODER);
        let dec = Decoder::create(&mut store, &cfg(), 2, 2, DecoderInit::Random, &mut r).unwrap();
        let again = Decoder::load(&store, &cfg()).unwrap().unwrap();
        assert_eq!(dec, again);
        assert!(Decoder::load(&ParamStore::new(), &cfg()).unwrap().is_none());
    }
}
