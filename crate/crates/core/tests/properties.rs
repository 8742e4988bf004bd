use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use seqnas_core::distill::{kd_loss, LogitMatrix};
use seqnas_core::search_space::{
    spec_digest, ArchitectureSpec, EncoderLayerSpec, HeadSpec, Op, Pooling, StemSpec,
};
use seqnas_core::surrogate::{self, mean_absolute_error, FeatureMatrix, PredictorConfig, ScorePrediction};
use seqnas_core::{FeatureLayout, SamplingMode, SearchSpaceConfig};

fn blocks_off() -> SearchSpaceConfig {
    SearchSpaceConfig { encoder_enabled: false, decoder_enabled: false, ..Default::default() }
}

#[test]
fn exact_uniform_covers_stem_and_head_evenly() {
    let cfg = blocks_off();
    assert_eq!(cfg.cardinality().unwrap(), 36);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts: HashMap<String, usize> = HashMap::new();
    let draws = 36_000;
    for _ in 0..draws {
        let spec = cfg.sample(&mut rng, SamplingMode::ExactUniform).unwrap();
        *counts.entry(spec.canonical_json()).or_default() += 1;
    }
    assert_eq!(counts.len(), 36);
    let expected = draws as f64 / 36.0;
    let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(35.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat:.2}, p = {p:.4}");
}

#[test]
fn exact_uniform_is_uniform_over_a_small_full_space() {
    let cfg = SearchSpaceConfig {
        stem_kernel_options: vec![3],
        stem_dropout_options: vec![false],
        encoder_layer_count_options: vec![1],
        mha_head_options: vec![1],
        decoder_layer_count_options: vec![1],
        decoder_head_options: vec![1, 2],
        head_pooling_options: vec![Pooling::Max],
        head_spatial_dropout_options: vec![false],
        ..Default::default()
    };
    let all = cfg.enumerate().unwrap();
    assert_eq!(all.len() as u128, cfg.cardinality().unwrap());
    let index: HashMap<_, _> = all.iter().enumerate().map(|(i, s)| (spec_digest(s), i)).collect();
    let mut counts = vec![0usize; all.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 24_000;
    for _ in 0..draws {
        let s = cfg.sample(&mut rng, SamplingMode::ExactUniform).unwrap().canonicalized();
        counts[index[&spec_digest(&s)]] += 1;
    }
    let expected = draws as f64 / all.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(all.len() as f64 - 1.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat:.2}, p = {p:.4}");
}

#[test]
fn single_head_gives_seven_variants() {
    let cfg = SearchSpaceConfig { mha_head_options: vec![1], ..Default::default() };
    let variants = cfg.enumerate_layer_variants();
    // Brute force over non-empty op subsets.
    let ops = [Op::Mha { heads: 1 }, Op::Gru, Op::Conv];
    let brute: HashSet<EncoderLayerSpec> = (1u8..8)
        .map(|mask| {
            EncoderLayerSpec::new(ops.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &o)| o).collect())
        })
        .collect();
    assert_eq!(variants.len(), 7);
    assert_eq!(variants.into_iter().collect::<HashSet<_>>(), brute);
}

#[test]
fn cardinality_products() {
    let cfg = SearchSpaceConfig::default();
    assert_eq!(cfg.cardinality().unwrap(), 4_705_272 * 9);
    assert_eq!(cfg.cardinality().unwrap(), 42_347_448);
    let paper = SearchSpaceConfig::preset("paper").unwrap();
    assert_eq!(paper.cardinality().unwrap(), 6 * 130_702 * 6);
}

fn three_op_spec(heads: u32) -> ArchitectureSpec {
    ArchitectureSpec {
        stem: StemSpec { kernel: 3, dropout: false },
        encoder: Some(vec![EncoderLayerSpec::new(vec![Op::Mha { heads }, Op::Gru, Op::Conv])]),
        decoder: None,
        head: HeadSpec { pooling: Pooling::Max, spatial_dropout: false },
    }
}

#[test]
fn mha_slice_width_rule() {
    let cfg = SearchSpaceConfig::default();
    cfg.validate_spec(&three_op_spec(8)).unwrap();
    let narrow = SearchSpaceConfig { d_model: 100, ..Default::default() };
    let err = narrow.validate_spec(&three_op_spec(8)).unwrap_err();
    assert!(err.0.iter().any(|m| m.contains("34") && m.contains('8')), "{err}");
}

#[test]
fn layout_lengths() {
    assert_eq!(FeatureLayout::new(&SearchSpaceConfig::default()).unwrap().len(), 43);
    let no_encoder = SearchSpaceConfig { encoder_enabled: false, ..Default::default() };
    assert_eq!(FeatureLayout::new(&no_encoder).unwrap().len(), 43 - (1 + 3 + 24));
}

#[test]
fn distinct_specs_get_distinct_vectors() {
    let cfg = SearchSpaceConfig::default();
    let layout = FeatureLayout::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut specs = HashMap::new();
    while specs.len() < 1000 {
        let s = cfg.sample(&mut rng, SamplingMode::PerFactor).unwrap().canonicalized();
        specs.insert(spec_digest(&s), s);
    }
    let vectors: HashSet<_> = specs.values().map(|s| layout.encode(s).unwrap()).collect();
    assert_eq!(vectors.len(), 1000);
}

#[test]
fn two_member_spread() {
    let p = ScorePrediction::from_members(&[0.4, 0.6]);
    assert!((p.mean - 0.5).abs() < 1e-12);
    assert!((p.std - 0.02f64.sqrt()).abs() < 1e-12);
    assert!((p.std - 0.1414).abs() < 1e-4);
}

#[test]
fn mae_matches_row_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pred: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let actual: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut total = 0.0;
    for i in 0..20 {
        total += if pred[i] > actual[i] { pred[i] - actual[i] } else { actual[i] - pred[i] };
    }
    assert!((mean_absolute_error(&pred, &actual) - total / 20.0).abs() < 1e-12);
    assert!((mean_absolute_error(&[0.7], &[0.5]) - 0.2).abs() < 1e-12);
}

#[test]
fn kd_loss_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f32> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
    let b: Vec<f32> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
    let ma = LogitMatrix::new(5, 3, a.clone()).unwrap();
    let mb = LogitMatrix::new(5, 3, b.clone()).unwrap();
    let oracle: f64 = a.iter().zip(&b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>() / 15.0;
    assert!((kd_loss(&ma, &mb).unwrap() - oracle).abs() < 1e-9);
    assert_eq!(kd_loss(&ma, &mb).unwrap(), kd_loss(&mb, &ma).unwrap());
    assert_eq!(kd_loss(&ma, &ma).unwrap(), 0.0);
}

/// Rows of a hidden linear function of AVec bits, sampled without repeats.
fn linear_rows(layout: &FeatureLayout, weights: &[f64], n: usize, seed: u64) -> (FeatureMatrix, Vec<f64>) {
    let cfg = layout.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut x = FeatureMatrix::new(layout.fingerprint(), layout.len());
    let mut y = Vec::new();
    while y.len() < n {
        let s = cfg.sample(&mut rng, SamplingMode::PerFactor).unwrap().canonicalized();
        if !seen.insert(spec_digest(&s)) {
            continue;
        }
        let v = layout.encode(&s).unwrap();
        y.push(v.bits.iter().zip(weights).map(|(&b, w)| f64::from(b) * w).sum::<f64>() + rng.random_range(-0.05..0.05));
        x.push(&v.bits).unwrap();
    }
    (x, y)
}

#[test]
fn far_points_are_less_certain_than_training_rows() {
    let cfg = SearchSpaceConfig::default();
    let layout = FeatureLayout::new(&cfg).unwrap();
    let predictor = PredictorConfig::default();
    let (mut far_total, mut train_total) = (0.0, 0.0);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (x, y) = linear_rows(&layout, &weights, 200, seed + 10);
        let model = surrogate::fit(&x, &y, &predictor, &mut rng).unwrap();

        // Random bit patterns at Hamming distance >= len/2 from every row.
        let d = layout.len();
        let mut far = FeatureMatrix::new(layout.fingerprint(), d);
        while far.rows() < 50 {
            let bits: Vec<u8> = (0..d).map(|_| rng.random_range(0..2)).collect();
            let min_dist = (0..x.rows())
                .map(|r| x.row(r).iter().zip(&bits).filter(|(a, b)| a != b).count())
                .min()
                .unwrap();
            if 2 * min_dist >= d {
                far.push(&bits).unwrap();
            }
        }
        let mean_std = |m: &FeatureMatrix| {
            let p = model.predict(m).unwrap();
            p.iter().map(|p| p.std).sum::<f64>() / p.len() as f64
        };
        far_total += mean_std(&far);
        train_total += mean_std(&x);
    }
    assert!(far_total >= train_total, "far {far_total:.4} < train {train_total:.4}");
}

#[test]
fn predictions_ignore_row_order() {
    let layout = FeatureLayout::new(&SearchSpaceConfig::default()).unwrap();
    let weights: Vec<f64> = (0..layout.len()).map(|i| (i as f64).sin()).collect();
    let (x, y) = linear_rows(&layout, &weights, 60, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = surrogate::fit(&x, &y, &PredictorConfig::default(), &mut rng).unwrap();
    let forward = model.predict(&x).unwrap();
    let order: Vec<usize> = (0..x.rows()).rev().collect();
    let backward = model.predict(&x.select(&order)).unwrap();
    for (i, &j) in order.iter().enumerate() {
        assert_eq!(backward[i], forward[j]);
    }
}
