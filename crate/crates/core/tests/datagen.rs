use std::collections::{BTreeMap, BTreeSet};

use pincer_core::datagen::*;
use pincer_core::encoders::GrayImage;
use pincer_core::{Error, ProductId};

fn small_cfg(pi: PiFunction) -> DatagenConfig {
    DatagenConfig {
        n_products: 400,
        queries_per_group: 30,
        image_side: 8,
        patch_grid: 2,
        pi,
        ..DatagenConfig::default()
    }
}

#[test]
fn catalog_is_seeded_and_well_formed() {
    let a = synth_catalog(100, 8, 4).unwrap();
    assert_eq!(a, synth_catalog(100, 8, 4).unwrap());
    assert_ne!(a, synth_catalog(100, 8, 5).unwrap());
    let ids: BTreeSet<ProductId> = a.iter().map(|p| p.id).collect();
    assert_eq!(ids.len(), 100);
    for p in &a {
        assert!(!p.title.is_empty() && p.title.ends_with(&p.category));
        assert!(CATEGORIES.contains(&p.category.as_str()));
        assert!(p.image.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(matches!(synth_catalog(9, 8, 0), Err(Error::Config(_))));
}

#[test]
fn brightness_is_uniform() {
    let cat = synth_catalog(10_000, 4, 1).unwrap();
    let n = cat.len() as f64;
    let b: Vec<f64> = cat.iter().map(|p| image_stats(&p.image).0).collect();
    let mean = b.iter().sum::<f64>() / n;
    let sigma_mean = (1.0f64 / 12.0).sqrt() / n.sqrt();
    assert!((mean - 0.5).abs() < 3.0 * sigma_mean, "mean {mean}");
    let mut bins = [0usize; 10];
    for v in &b {
        bins[((v * 10.0) as usize).min(9)] += 1;
    }
    let sigma = (n * 0.1 * 0.9).sqrt();
    for c in bins {
        assert!((c as f64 - n * 0.1).abs() < 3.0 * sigma, "{bins:?}");
    }
}

#[test]
fn image_stats_examples() {
    assert_eq!(image_stats(&GrayImage::new(4, 4, vec![0.0; 16]).unwrap()), (0.0, 0.0));
    let (b, g) = image_stats(&GrayImage::new(3, 5, vec![0.6; 15]).unwrap());
    assert!((b - 0.6).abs() < 1e-15 && g == 0.0);
    // vertical edge between columns 1 and 2: central differences of 0.5 at
    // x = 1 and x = 2, one-sided zeros at the borders
    let px: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 0.0 } else { 1.0 }).collect();
    let (b, g) = image_stats(&GrayImage::new(4, 4, px).unwrap());
    assert_eq!(b, 0.5);
    assert!((g - (0.5 * 2.0 * 4.0) / 16.0).abs() < 1e-15);
}

#[test]
fn strict_quantile_keeps_top_decile() {
    let pi = PiFunction {
        kind: PiKind::Brightness,
        direction: PiDirection::PreferHigh,
        quantile: 0.1,
    };
    let cat = synth_catalog(400, 8, 2).unwrap();
    let data = generate_pairs(&cat, &small_cfg(pi)).unwrap();
    let bright: BTreeMap<ProductId, f64> = cat.iter().map(|p| (p.id, image_stats(&p.image).0)).collect();
    let mut checked = 0;
    for rec in &data.records {
        let mut vals: Vec<f64> = rec.impressions.iter().map(|id| bright[id]).collect();
        vals.sort_by(f64::total_cmp);
        // nearest-rank 90th percentile
        let p90 = vals[(0.9 * vals.len() as f64).ceil() as usize - 1];
        for id in &rec.atc {
            assert!(bright[id] >= p90);
            checked += 1;
        }
    }
    assert!(checked > 100);
    assert_eq!(check_pi_integrity(&cat, &data, &pi).unwrap(), checked);
}

#[test]
fn low_gradient_preference_holds() {
    let pi = PiFunction {
        kind: PiKind::MeanGradient,
        direction: PiDirection::PreferLow,
        quantile: 0.25,
    };
    let cat = synth_catalog(400, 8, 3).unwrap();
    let data = generate_pairs(&cat, &small_cfg(pi)).unwrap();
    let total: usize = data.records.iter().map(|r| r.atc.len()).sum();
    assert_eq!(check_pi_integrity(&cat, &data, &pi).unwrap(), total);
}

#[test]
fn full_quantile_draws_from_whole_impression_set() {
    let pi = PiFunction { quantile: 1.0, ..PiFunction::default() };
    let cat = synth_catalog(400, 8, 4).unwrap();
    let data = generate_pairs(&cat, &small_cfg(pi)).unwrap();
    for rec in &data.records {
        let imp: BTreeSet<_> = rec.impressions.iter().collect();
        let sur: BTreeSet<_> = rec.survivors.iter().collect();
        assert_eq!(imp, sur);
        assert!(rec.atc.iter().all(|a| imp.contains(a)));
    }
}

#[test]
fn splits_are_disjoint_and_pairs_unique() {
    let cat = synth_catalog(400, 8, 5).unwrap();
    let data = generate_pairs(&cat, &small_cfg(PiFunction::default())).unwrap();
    let mut by_split: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    for r in &data.records {
        by_split.entry(r.split).or_default().insert(r.query.clone());
        assert!((1..=5).contains(&r.atc.len()));
        assert_eq!(r.impressions.len(), 80.min(100));
    }
    let s: Vec<&BTreeSet<String>> = by_split.values().collect();
    assert_eq!(s.len(), 3);
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(s[i].is_disjoint(s[j]));
        }
    }
    let n = data.records.len();
    assert_eq!(by_split[&Split::Train].len(), n * 8 / 10);
    assert_eq!(by_split[&Split::Val].len(), n / 10);
    for split in [Split::Train, Split::Val, Split::Test] {
        let pairs = data.pairs(split);
        let uniq: BTreeSet<_> = pairs.iter().collect();
        assert_eq!(uniq.len(), pairs.len());
        assert_eq!(data.qrels(split).len(), by_split[&split].len());
    }
}

#[test]
fn generation_is_deterministic_and_warns_on_small_groups() {
    let cat = synth_catalog(400, 8, 6).unwrap();
    let cfg = small_cfg(PiFunction::default());
    let a = generate_pairs(&cat, &cfg).unwrap();
    assert_eq!(a, generate_pairs(&cat, &cfg).unwrap());
    // 80 per category, fewer than 5 pages of 20
    assert_eq!(a.warnings.len(), 5);
    let tiny = synth_catalog(50, 8, 6).unwrap();
    let t = generate_pairs(&tiny, &cfg).unwrap();
    assert!(t.warnings.iter().any(|w| w.contains("fewer than one page")));
    assert!(t.records.iter().all(|r| r.impressions.len() == 10));
}

#[test]
fn integrity_check_catches_tampering() {
    let cat = synth_catalog(400, 8, 7).unwrap();
    let pi = PiFunction::default();
    let mut data = generate_pairs(&cat, &small_cfg(pi)).unwrap();
    let rec = &mut data.records[0];
    let worst = *rec.impressions.iter().find(|id| !rec.survivors.contains(id)).unwrap();
    rec.atc = vec![worst];
    assert!(matches!(check_pi_integrity(&cat, &data, &pi), Err(Error::Data(_))));
}

#[test]
fn pi_filter_keep_counts() {
    let pi = PiFunction { quantile: 0.25, ..PiFunction::default() };
    assert_eq!(pi.keep(100), 25);
    assert_eq!(pi.keep(10), 3);
    assert_eq!(pi.keep(1), 1);
    assert!(PiFunction { quantile: 1.5, ..pi }.validate().is_err());
}

#[test]
fn gaussian_clusters_shape() {
    let cfg = GaussianPairConfig::default();
    let g = gaussian_pair_clusters(&cfg).unwrap();
    assert_eq!(g.catalog.len(), cfg.groups * cfg.products_per_group);
    assert_eq!(g.train.len(), cfg.groups * cfg.train_pairs_per_group);
    assert_eq!(g.test.len(), cfg.groups * cfg.test_pairs_per_group);
    for p in g.train.iter().chain(&g.test) {
        assert!(g.product_group.contains_key(&p.product));
        assert_eq!(p.query.len(), cfg.tokens_per_item);
    }
    let again = gaussian_pair_clusters(&cfg).unwrap();
    assert_eq!(again.train, g.train);
}

#[test]
fn catalog_conversion_matches_config() {
    let cfg = small_cfg(PiFunction::default());
    let cat = synth_catalog(40, cfg.image_side, 0).unwrap();
    let c = to_catalog(&cat, 1024, cfg.patch_grid, cfg.histogram_bins).unwrap();
    let p = c.get(ProductId(3)).unwrap();
    assert_eq!(p.image.num_patches(), cfg.patch_grid * cfg.patch_grid);
    assert_eq!(p.image.patches.cols(), cfg.image_raw_dim());
    assert_eq!(p.title.len(), 4);
    let pairs = to_training_pairs(&[("red wool shirt".into(), ProductId(3))], 1024).unwrap();
    assert_eq!(pairs[0].product, ProductId(3));
}
