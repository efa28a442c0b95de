mod common;

use pincer_core::config::ModelConfig;
use pincer_core::diff::{self, Tensor};
use pincer_core::encoders::*;
use pincer_core::model::Model;
use pincer_core::Error;
use proptest::prelude::*;

fn small_model() -> Model {
    Model::new(ModelConfig {
        d: 8,
        vocab_size: 64,
        token_dim: 8,
        image_raw_dim: 10,
        k_intents: 4,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn image(seed: u64) -> ImagePatchGrid {
    let px: Vec<f64> = (0..64).map(|i| ((i as u64 * 37 + seed * 11) % 97) as f64 / 96.0).collect();
    ImagePatchGrid::from_image(&GrayImage::new(8, 8, px).unwrap(), 2, 8).unwrap()
}

fn product(m: &Model, title: &str, img: ImagePatchGrid) -> ProductInput {
    ProductInput {
        title: m.text_input(title).unwrap(),
        image: img,
    }
}

fn unit(v: &[f64]) -> bool {
    (diff::l2_norm(v) - 1.0).abs() < 1e-6 && v.iter().all(|x| (-1.0..=1.0).contains(x))
}

#[test]
fn tokenize_splits_lowercases_and_hashes() {
    let t = tokenize("Red T-Shirt", 32768).unwrap();
    let want: Vec<usize> = ["red", "t", "shirt"]
        .iter()
        .map(|w| (stable_hash(w.as_bytes()) % 32768) as usize)
        .collect();
    assert_eq!(t.tokens, want);
    assert_eq!(t.source, "Red T-Shirt");
    assert_eq!(tokenize("Red T-Shirt", 32768).unwrap(), t);
    assert_eq!(tokenize("", 32768), Err(Error::EmptyInput));
    assert_eq!(tokenize("  \t ", 32768), Err(Error::EmptyInput));
}

#[test]
fn stable_hash_known_values() {
    // FNV-1a 64 reference values
    assert_eq!(stable_hash(b""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(stable_hash(b"a"), 0xaf63_dc4c_8601_ec8c);
}

proptest! {
    #[test]
    fn token_ids_in_vocab(text in "[a-zA-Z0-9 ,.-]{0,40}", vocab in 1usize..5000) {
        match tokenize(&text, vocab) {
            Ok(t) => {
                prop_assert!(!t.is_empty());
                prop_assert!(t.tokens.iter().all(|&id| id < vocab));
                prop_assert_eq!(t.len(), words(&text).len());
            }
            Err(e) => {
                prop_assert_eq!(e, Error::EmptyInput);
                prop_assert!(words(&text).is_empty());
            }
        }
    }

    #[test]
    fn query_embeddings_unit_and_counts(text in "[a-z]{1,6}( [a-z]{1,6}){0,5}") {
        let m = small_model();
        let q = m.encode_text_query(&text).unwrap();
        prop_assert!(unit(q.concat.values()) && unit(q.text_half.values()) && unit(q.image_half.values()));
        prop_assert_eq!(q.concat.dim(), 16);
        prop_assert_eq!(q.token_features.len(), words(&text).len());
        prop_assert_eq!(q.token_image_features.len(), words(&text).len());
        prop_assert_eq!(&q, &m.encode_text_query(&text).unwrap());
    }
}

#[test]
fn concat_is_renormalized_halves() {
    let m = small_model();
    let q = m.encode_text_query("blue cotton shirt").unwrap();
    let mut joined = q.text_half.values().to_vec();
    joined.extend_from_slice(q.image_half.values());
    diff::normalize(&mut joined);
    for (a, b) in joined.iter().zip(q.concat.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn one_token_query_pools_to_its_token() {
    let m = small_model();
    let q = m.encode_text_query("wool").unwrap();
    assert_eq!(q.token_features.len(), 1);
    for (a, b) in q.token_features[0].values().iter().zip(q.text_half.values()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in q.token_image_features[0].values().iter().zip(q.image_half.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn out_of_vocab_token_is_contract_error() {
    let m = small_model();
    let bad = TextInput::Tokens(TextTokenSequence {
        tokens: vec![1, 64],
        source: "x".into(),
    });
    assert!(matches!(m.encoders.encode_query(&m.store, &bad), Err(Error::Contract(_))));
}

#[test]
fn product_encoding_counts_and_norms() {
    let m = small_model();
    let p = product(&m, "Red wool scarf", image(1));
    let e = m.encoders.encode_product(&m.store, &p).unwrap();
    assert!(unit(e.concat.values()));
    assert_eq!(e.text_features.len(), 3);
    assert_eq!(e.image_features.len(), 4);
    assert_eq!(e, m.encoders.encode_product(&m.store, &p).unwrap());
}

#[test]
fn identical_patches_share_the_pooled_direction() {
    let m = small_model();
    let row: Vec<f64> = vec![0.4, 0.1, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
    let patches = Tensor::from_rows(&vec![row; 4]).unwrap();
    let p = product(&m, "plain mug", ImagePatchGrid::from_features(patches));
    let e = m.encoders.encode_product(&m.store, &p).unwrap();
    for f in &e.image_features {
        for (a, b) in f.values().iter().zip(e.image_half.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn perturbing_one_patch_changes_only_its_feature() {
    let m = small_model();
    let base = image(2);
    let mut moved = base.clone();
    moved.patches.row_mut(2)[0] += 0.3;
    moved.patches.row_mut(2)[1] += 0.1;
    let a = m.encoders.encode_product(&m.store, &product(&m, "red mug", base)).unwrap();
    let b = m.encoders.encode_product(&m.store, &product(&m, "red mug", moved)).unwrap();
    for i in 0..4 {
        let same = a.image_features[i] == b.image_features[i];
        assert_eq!(same, i != 2, "patch {i}");
    }
    assert_ne!(a.image_half, b.image_half);
    assert_eq!(a.text_half, b.text_half);
}

#[test]
fn patch_grid_statistics() {
    // left half black, right half white, 8x8 into 2x2 patches
    let px: Vec<f64> = (0..64).map(|i| if i % 8 < 4 { 0.0 } else { 1.0 }).collect();
    let g = ImagePatchGrid::from_image(&GrayImage::new(8, 8, px).unwrap(), 2, 4).unwrap();
    assert_eq!(g.num_patches(), 4);
    assert_eq!(g.patches.row(0)[0], 0.0);
    assert_eq!(g.patches.row(1)[0], 1.0);
    assert_eq!(&g.patches.row(0)[2..], &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(&g.patches.row(1)[2..], &[0.0, 0.0, 0.0, 1.0]);
    // the step sits on the patch border, so both patches see a nonzero gradient
    assert!(g.patches.row(0)[1] > 0.0 && g.patches.row(1)[1] > 0.0);
    assert!(matches!(
        ImagePatchGrid::from_image(&GrayImage::new(6, 6, vec![0.0; 36]).unwrap(), 4, 4),
        Err(Error::Config(_))
    ));
}

#[test]
fn embedding_rejects_zero_and_nan() {
    assert!(Embedding::new(vec![0.0, 0.0], Space::QueryText).is_err());
    assert!(Embedding::new(vec![f64::NAN, 1.0], Space::QueryText).is_err());
    let e = Embedding::new(vec![3.0, 4.0], Space::ProductText).unwrap();
    assert_eq!(e.values(), &[0.6, 0.8]);
    assert_eq!(Space::parse(Space::Concatenated.as_str()), Some(Space::Concatenated));
    assert_eq!(Space::Concatenated.dim(8), 16);
}
