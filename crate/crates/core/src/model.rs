//! The trainable model: encoders, intent codebook and (after stage 2) the decoder,
//! all backed by one named parameter store.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::codebook::IntentCodebook;
use crate::config::ModelConfig;
use crate::decoder::{Decoder, DecoderInit};
use crate::diff::{self, ParamId, ParamStore, Tensor};
use crate::encoders::{tokenize, EncodedQuery, Encoders, ProductInput, TextInput};
use crate::rng;
use crate::{Error, ProductId, Result};

pub const CODEBOOK_PARAM: &str = "intent.codebook";

/// Which training stages a model has been through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Stage {
    #[cfg_attr(feature = "serde", serde(rename = "1"))]
    One,
    #[cfg_attr(feature = "serde", serde(rename = "1+2"))]
    Two,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::One => "1",
            Stage::Two => "1+2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" => Some(Stage::One),
            "1+2" => Some(Stage::Two),
            _ => None,
        }
    }
}

/// Products addressable by id, in ascending id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    ids: Vec<ProductId>,
    inputs: Vec<ProductInput>,
    index: BTreeMap<ProductId, usize>,
}

impl Catalog {
    pub fn new(items: impl IntoIterator<Item = (ProductId, ProductInput)>) -> Result<Self> {
        let mut sorted: Vec<(ProductId, ProductInput)> = items.into_iter().collect();
        sorted.sort_by_key(|(id, _)| *id);
        if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Data(format!("duplicate product id {}", w[0].0)));
        }
        let (ids, inputs): (Vec<_>, Vec<_>) = sorted.into_iter().unzip();
        let index = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Ok(Self { ids, inputs, index })
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

    pub fn get(&self, id: ProductId) -> Option<&ProductInput> {
        self.index.get(&id).map(|&i| &self.inputs[i])
    }

    pub fn require(&self, id: ProductId) -> Result<&ProductInput> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("product {id} is not in the catalog")))
    }

    pub fn position(&self, id: ProductId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ProductId, &ProductInput)> {
        self.ids.iter().copied().zip(self.inputs.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Encoders,
    pub codebook: ParamId,
    pub decoder: Option<Decoder>,
    /// Optimizer steps applied to the codebook so far.
    pub codebook_steps: u64,
}

impl Model {
    /// Fresh stage-1 model; all randomness comes from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::derive(config.seed, rng::stream::ENCODERS);
        let encoders = Encoders::create(&mut store, &config, &mut r)?;
        let cb = IntentCodebook::init_uniform(config.k_intents, config.concat_dim(), config.seed)?;
        let codebook = store.add(CODEBOOK_PARAM, cb.vectors().clone())?;
        Ok(Self {
            config,
            store,
            encoders,
            codebook,
            decoder: None,
            codebook_steps: 0,
        })
    }

    /// Rebuilds a model from named arrays (as stored in a checkpoint). With a
    /// decoder present the stage-1 parameters come back frozen.
    pub fn from_arrays(config: ModelConfig, arrays: Vec<(String, Tensor)>, codebook_steps: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, t) in arrays {
            store.add(name, t)?;
        }
        let encoders = Encoders::load(&store, &config)?;
        let codebook = store.require(CODEBOOK_PARAM)?;
        let shape = store.value(codebook).shape();
        if shape != [config.k_intents, config.concat_dim()] {
            return Err(Error::Format(format!(
                "codebook shape {:?} does not match k_intents={} and 2d={}",
                shape,
                config.k_intents,
                config.concat_dim()
            )));
        }
        let decoder = Decoder::load(&store, &config)?;
        let mut model = Self {
            config,
            store,
            encoders,
            codebook,
            decoder,
            codebook_steps,
        };
        if model.decoder.is_some() {
            model.freeze_stage1();
        }
        Ok(model)
    }

    pub fn stage(&self) -> Stage {
        if self.decoder.is_some() {
            Stage::Two
        } else {
            Stage::One
        }
    }

    pub fn intent_codebook(&self) -> IntentCodebook {
        IntentCodebook::from_tensor(self.store.value(self.codebook).clone())
            .expect("codebook validated at construction")
            .with_steps(self.codebook_steps)
    }

    /// Adds a freshly initialized decoder (seeded from the model seed).
    pub fn attach_decoder(&mut self, init: DecoderInit) -> Result<()> {
        if self.decoder.is_some() {
            return Err(Error::State("model already has a decoder".into()));
        }
        let mut r = rng::derive(self.config.seed, rng::stream::DECODER);
        let dec = Decoder::create(
            &mut self.store,
            &self.config,
            self.config.decoder_layers,
            self.config.decoder_heads,
            init,
            &mut r,
        )?;
        self.decoder = Some(dec);
        Ok(())
    }

    /// Marks every non-decoder parameter frozen.
    pub fn freeze_stage1(&mut self) {
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, p)| !Decoder::is_decoder_param(&p.name))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.store.set_frozen(id, true);
        }
    }

    /// Projects each intent vector back onto the unit sphere.
    pub fn renormalize_codebook(&mut self) {
        let t = self.store.value_mut(self.codebook);
        for i in 0..t.rows() {
            diff::normalize(t.row_mut(i));
        }
    }

    /// Parameters in insertion order, as `(name, value)`.
    pub fn named_arrays(&self) -> Vec<(&str, &Tensor)> {
        self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect()
    }

    pub fn text_input(&self, text: &str) -> Result<TextInput> {
        Ok(TextInput::Tokens(tokenize(text, self.config.vocab_size)?))
    }

    pub fn encode_text_query(&self, text: &str) -> Result<EncodedQuery> {
        let input = self.text_input(text)?;
        self.encoders.encode_query(&self.store, &input)
    }

    /// Concatenated embedding of every catalog product, in catalog order.
    pub fn product_embeddings(&self, catalog: &Catalog) -> Result<Vec<(ProductId, Vec<f64>)>> {
        let items: Vec<&ProductInput> = catalog.iter().map(|(_, p)| p).collect();
        let vecs = self.encoders.product_concats(&self.store, &items)?;
        Ok(catalog.ids().iter().copied().zip(vecs).collect())
    }
}
