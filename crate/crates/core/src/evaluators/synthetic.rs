//! Deterministic stand-in for training: a hidden function of the AVec bits.
//!
//! `score = sigmoid(w . phi + sum_{i<j} q_ij phi_i phi_j) + noise`, with
//! `w` and the sparse pair weights `q` drawn once from the bench
//! seed, and the noise drawn from `(bench seed, arch id)` so repeated
//! queries agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{EvalError, EvalRequest, EvalResult, Evaluator};
use crate::avec::{FeatureLayout, FeatureVector};
use crate::distill::{example_fingerprint, LogitMatrix, PredictionCache};
use crate::search_space::{ArchId, ConfigError, SearchSpaceConfig};

const PAIR_DENSITY: f64 = 0.08;
const LOGIT_CLASSES: usize = 2;

#[derive(Debug, Clone)]
pub struct SyntheticBench {
    layout: FeatureLayout,
    bench_seed: u64,
    noise_std: f64,
    weights: Vec<f64>,
    pairs: Vec<(usize, usize, f64)>,
    prediction_rows: usize,
}

fn seed_for(bench_seed: u64, arch_id: &ArchId, salt: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(bench_seed.to_le_bytes());
    h.update(arch_id.as_str().as_bytes());
    h.update(salt.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl SyntheticBench {
    pub fn new(space: &SearchSpaceConfig, bench_seed: u64, noise_std: f64) -> Result<Self, ConfigError> {
        let layout = FeatureLayout::new(space)?;
        let mut rng = ChaCha8Rng::seed_from_u64(bench_seed);
        let unary = Normal::new(0.0, 0.6).expect("valid");
        let pair = Normal::new(0.0, 0.8).expect("valid");
        let d = layout.len();
        let weights: Vec<f64> = (0..d).map(|_| unary.sample(&mut rng)).collect();
        let mut pairs = Vec::new();
        for i in 0..d {
            for j in i + 1..d {
                if rng.random_bool(PAIR_DENSITY) {
                    pairs.push((i, j, pair.sample(&mut rng)));
                }
            }
        }
        Ok(Self {
            layout,
            bench_seed,
            noise_std: noise_std.max(0.0),
            weights,
            pairs,
            prediction_rows: 32,
        })
    }

    /// Rows of the pseudo-logit matrix registered per evaluated architecture
    /// when a cache is supplied; 0 disables registration.
    pub fn with_prediction_rows(mut self, rows: usize) -> Self {
        self.prediction_rows = rows;
        self
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    /// Noise-free score of a feature vector.
    pub fn clean_score(&self, phi: &FeatureVector) -> f64 {
        let x = &phi.bits;
        let mut z = 0.0;
        for (w, &b) in self.weights.iter().zip(x) {
            if b == 1 {
                z += w;
            }
        }
        for &(i, j, q) in &self.pairs {
            if x[i] == 1 && x[j] == 1 {
                z += q;
            }
        }
        1.0 / (1.0 + (-z).exp())
    }

    pub fn score(&self, arch_id: &ArchId, phi: &FeatureVector) -> f64 {
        let clean = self.clean_score(phi);
        if self.noise_std == 0.0 {
            return clean;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(self.bench_seed, arch_id, "noise"));
        let noise = Normal::new(0.0, self.noise_std).expect("finite std");
        clean + noise.sample(&mut rng)
    }

    /// Example ids used for the pseudo-logit matrices.
    pub fn example_ids(&self) -> Vec<String> {
        (0..self.prediction_rows).map(|i| format!("synthetic-{i}")).collect()
    }

    fn pseudo_logits(&self, arch_id: &ArchId, score: f64) -> LogitMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(self.bench_seed, arch_id, "logits"));
        let p = score.clamp(1e-3, 1.0 - 1e-3);
        let margin = (p / (1.0 - p)).ln();
        let mut data = Vec::with_capacity(self.prediction_rows * LOGIT_CLASSES);
        for _ in 0..self.prediction_rows {
            let jitter: f64 = rng.random_range(-0.5..0.5);
            data.push(0.0f32);
            data.push((margin + jitter) as f32);
        }
        LogitMatrix::new(self.prediction_rows, LOGIT_CLASSES, data).expect("shape")
    }
}

impl Evaluator for SyntheticBench {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn evaluate(&self, req: &EvalRequest, cache: Option<&PredictionCache>) -> Result<EvalResult, EvalError> {
        let phi = self.layout.encode(&req.spec).map_err(|e| match e {
            crate::avec::EncodeError::Spec(s) => EvalError::InvalidSpec(s),
        })?;
        let score = self.score(&req.arch_id, &phi);
        let epochs = req.epochs.max(1) as usize;
        // Rises to the final score at the last epoch.
        let per_epoch: Vec<f64> =
            (0..epochs).map(|e| score - 0.05 * (epochs - 1 - e) as f64 / epochs as f64).collect();
        let mut preds_ref = None;
        if let Some(cache) = cache.filter(|_| self.prediction_rows > 0) {
            if !cache.contains(&req.arch_id) {
                let fp = example_fingerprint(&self.example_ids());
                cache.write(&req.arch_id, &self.pseudo_logits(&req.arch_id, score), &fp)?;
            }
            preds_ref = Some(req.arch_id.clone());
        }
        Ok(EvalResult {
            arch_id: req.arch_id.clone(),
            score,
            metric_name: "synthetic_score".into(),
            per_epoch,
            preds_ref,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{spec_digest, SamplingMode};

    fn request(space: &SearchSpaceConfig, seed: u64) -> EvalRequest {
        let spec = space.sample(&mut ChaCha8Rng::seed_from_u64(seed), SamplingMode::PerFactor).unwrap();
        EvalRequest {
            arch_id: spec_digest(&spec),
            spec,
            seed: 0,
            teacher_ids: vec![],
            kd_weight: 0.0,
            epochs: 4,
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let space = SearchSpaceConfig::default();
        let bench = SyntheticBench::new(&space, 5, 0.0).unwrap();
        let mut scores = Vec::new();
        for s in 0..300 {
            let req = request(&space, s);
            let a = bench.evaluate(&req, None).unwrap();
            let b = bench.evaluate(&req, None).unwrap();
            assert_eq!(a, b);
            assert!(a.score > 0.0 && a.score < 1.0);
            a.check().unwrap();
            assert_eq!(a.per_epoch.len(), 4);
            scores.push(a.score);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
        assert!(var > 1e-4);
    }

    #[test]
    fn noise_is_keyed_by_arch() {
        let space = SearchSpaceConfig::default();
        let noisy = SyntheticBench::new(&space, 5, 0.05).unwrap();
        let clean = SyntheticBench::new(&space, 5, 0.0).unwrap();
        let req = request(&space, 1);
        let a = noisy.evaluate(&req, None).unwrap().score;
        assert_eq!(a, noisy.evaluate(&req, None).unwrap().score);
        assert_ne!(a, clean.evaluate(&req, None).unwrap().score);
    }

    #[test]
    fn registers_pseudo_logits() {
        let space = SearchSpaceConfig::default();
        let bench = SyntheticBench::new(&space, 5, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = PredictionCache::open(dir.path()).unwrap();
        let req = request(&space, 2);
        let res = bench.evaluate(&req, Some(&cache)).unwrap();
        assert_eq!(res.preds_ref.as_ref(), Some(&req.arch_id));
        let (m, desc) = cache.read(&req.arch_id).unwrap();
        assert_eq!(m.shape(), (32, 2));
        assert_eq!(desc.fingerprint, example_fingerprint(&bench.example_ids()));
        assert_eq!(bench.evaluate(&req, Some(&cache)).unwrap(), res);
        let off = bench.clone().with_prediction_rows(0);
        assert_eq!(off.evaluate(&req, Some(&cache)).unwrap().preds_ref, None);
    }

    #[test]
    fn rejects_invalid_spec() {
        let space = SearchSpaceConfig::default();
        let bench = SyntheticBench::new(&space, 5, 0.0).unwrap();
        let mut req = request(&space, 2);
        req.spec.stem.kernel = 2;
        assert!(matches!(bench.evaluate(&req, None), Err(EvalError::InvalidSpec(_))));
    }
}
