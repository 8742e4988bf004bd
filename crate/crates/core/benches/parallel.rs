//! Sequential versus rayon execution of the data-parallel hot spots.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqnas_core::evaluators::{EvalRequest, Evaluator, SyntheticBench};
use seqnas_core::search_space::spec_digest;
use seqnas_core::selector::thompson_select;
use seqnas_core::surrogate::{fit_with, FeatureMatrix, PredictorConfig, ScorePrediction};
use seqnas_core::{Exec, FeatureLayout, SamplingMode, SearchSpaceConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn training_set(rows: usize) -> (FeatureMatrix, Vec<f64>, SyntheticBench) {
    let space = SearchSpaceConfig::default();
    let layout = FeatureLayout::new(&space).unwrap();
    let bench = SyntheticBench::new(&space, 1, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut x = FeatureMatrix::new(layout.fingerprint(), layout.len());
    let mut y = Vec::with_capacity(rows);
    for _ in 0..rows {
        let spec = space.sample(&mut rng, SamplingMode::PerFactor).unwrap();
        let v = layout.encode(&spec).unwrap();
        y.push(bench.score(&spec_digest(&spec), &v));
        x.push(&v.bits).unwrap();
    }
    (x, y, bench)
}

fn surrogate(c: &mut Criterion) {
    let (x, y, _) = training_set(300);
    let cfg = PredictorConfig::default();
    let mut group = c.benchmark_group("gbdt_bag_fit_300");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                black_box(fit_with(&x, &y, &cfg, &mut rng, exec).unwrap())
            })
        });
    }
    group.finish();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = fit_with(&x, &y, &cfg, &mut rng, Exec::Parallel).unwrap();
    let (probe, _, _) = training_set(2000);
    let mut group = c.benchmark_group("predict_2000");
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| black_box(model.predict_with(&probe, exec).unwrap())));
    }
    group.finish();
}

fn synthetic_batch(c: &mut Criterion) {
    let space = SearchSpaceConfig::default();
    let bench = SyntheticBench::new(&space, 3, 0.01).unwrap().with_prediction_rows(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let requests: Vec<EvalRequest> = (0..500)
        .map(|_| {
            let spec = space.sample(&mut rng, SamplingMode::PerFactor).unwrap().canonicalized();
            EvalRequest { arch_id: spec_digest(&spec), spec, seed: 0, teacher_ids: vec![], kd_weight: 0.0, epochs: 10 }
        })
        .collect();
    let mut group = c.benchmark_group("synthetic_eval_500");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| black_box(exec.map_slice(&requests, |r| bench.evaluate(r, None).unwrap().score)))
        });
    }
    group.finish();
}

fn thompson_monte_carlo(c: &mut Criterion) {
    let preds = [ScorePrediction { mean: 0.0, std: 1.0 }, ScorePrediction { mean: 1.0, std: 1.0 }];
    let mut group = c.benchmark_group("thompson_trials");
    let trials = 10_000usize;
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, trials), &trials, |b, &n| {
            b.iter(|| {
                // One rng per chunk keeps the result independent of scheduling.
                let wins: usize = exec
                    .map_indexed(n / 1000, |chunk| {
                        let mut rng = ChaCha8Rng::seed_from_u64(chunk as u64);
                        (0..1000).filter(|_| thompson_select(&preds, 1, &mut rng).unwrap()[0] == 1).count()
                    })
                    .into_iter()
                    .sum();
                black_box(wins as f64 / n as f64)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, surrogate, synthetic_batch, thompson_monte_carlo);
criterion_main!(benches);
