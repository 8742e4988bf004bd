//! Answers evaluation requests from a recorded architecture/score table.

use std::collections::HashMap;
use std::path::Path;

use super::{EvalError, EvalRequest, EvalResult, Evaluator};
use crate::avec::{EncodeError, FeatureLayout};
use crate::benchdata::{complete_specs, read_bench_file, BenchError, BenchRecord};
use crate::distill::PredictionCache;
use crate::search_space::{spec_digest, ArchId, ArchitectureSpec, SearchSpaceConfig};

#[derive(Debug, Clone)]
pub struct BenchLookup {
    layout: FeatureLayout,
    by_id: HashMap<ArchId, usize>,
    by_avec: HashMap<Vec<u8>, usize>,
    records: Vec<BenchRecord>,
}

impl BenchLookup {
    /// Builds the index. Specs missing from records are decoded from their
    /// vectors. When an architecture appears more than once the first
    /// occurrence wins.
    pub fn new(mut records: Vec<BenchRecord>, space: &SearchSpaceConfig) -> Result<Self, BenchError> {
        let layout = FeatureLayout::new(space).map_err(|e| BenchError::Record { index: 0, message: e.to_string() })?;
        complete_specs(&mut records, &layout)?;
        let mut by_id = HashMap::new();
        let mut by_avec = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            let spec = r.spec.as_ref().expect("completed");
            by_id.entry(spec_digest(spec)).or_insert(i);
            by_avec.entry(r.avec.clone()).or_insert(i);
        }
        Ok(Self { layout, by_id, by_avec, records })
    }

    /// Loads a canonical bench file, keeping only `dataset` when given.
    pub fn from_file(path: &Path, space: &SearchSpaceConfig, dataset: Option<&str>) -> Result<Self, BenchError> {
        let file = read_bench_file(path)?;
        let layout = FeatureLayout::new(space).map_err(|e| BenchError::Record { index: 0, message: e.to_string() })?;
        file.check_layout(&layout)?;
        let records = file
            .records
            .into_iter()
            .filter(|r| dataset.is_none_or(|d| r.dataset == d))
            .collect();
        Self::new(records, space)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[BenchRecord] {
        &self.records
    }

    fn find(&self, req: &EvalRequest) -> Result<&BenchRecord, EvalError> {
        if let Some(&i) = self.by_id.get(&req.arch_id) {
            return Ok(&self.records[i]);
        }
        let phi = self.layout.encode(&req.spec).map_err(|e| match e {
            EncodeError::Spec(s) => EvalError::InvalidSpec(s),
        })?;
        self.by_avec
            .get(&phi.bits)
            .map(|&i| &self.records[i])
            .ok_or_else(|| EvalError::Miss(req.arch_id.clone()))
    }
}

impl Evaluator for BenchLookup {
    fn name(&self) -> &str {
        "bench"
    }

    fn evaluate(&self, req: &EvalRequest, _cache: Option<&PredictionCache>) -> Result<EvalResult, EvalError> {
        let rec = self.find(req)?;
        Ok(EvalResult {
            arch_id: req.arch_id.clone(),
            score: rec.best_score,
            metric_name: rec.metric_name.clone(),
            per_epoch: Vec::new(),
            preds_ref: None,
        })
    }

    fn candidate_pool(&self) -> Option<Vec<ArchitectureSpec>> {
        let mut seen = std::collections::HashSet::new();
        Some(
            self.records
                .iter()
                .filter(|r| seen.insert(r.avec.clone()))
                .map(|r| r.spec.clone().expect("completed"))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchdata::{write_bench_file, Method};
    use crate::search_space::SamplingMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(space: &SearchSpaceConfig, n: usize) -> Vec<BenchRecord> {
        let layout = FeatureLayout::new(space).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|i| {
                let spec = space.sample(&mut rng, SamplingMode::PerFactor).unwrap();
                BenchRecord {
                    dataset: if i % 2 == 0 { "a".into() } else { "b".into() },
                    method: Method::Random,
                    avec: layout.encode(&spec).unwrap().bits,
                    spec: (i % 3 != 0).then_some(spec),
                    best_score: i as f64 / 100.0,
                    metric_name: "acc".into(),
                    epochs: None,
                }
            })
            .collect()
    }

    fn request(spec: &ArchitectureSpec) -> EvalRequest {
        EvalRequest {
            arch_id: spec_digest(spec),
            spec: spec.clone(),
            seed: 0,
            teacher_ids: vec![],
            kd_weight: 0.0,
            epochs: 1,
        }
    }

    #[test]
    fn hits_and_misses() {
        let space = SearchSpaceConfig::default();
        let recs = table(&space, 12);
        let lookup = BenchLookup::new(recs.clone(), &space).unwrap();
        let pool = lookup.candidate_pool().unwrap();
        for spec in &pool {
            let res = lookup.evaluate(&request(spec), None).unwrap();
            assert_eq!(res.metric_name, "acc");
        }
        let first = lookup.evaluate(&request(&pool[0]), None).unwrap();
        assert_eq!(first.score, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let outside = loop {
            let s = space.sample(&mut rng, SamplingMode::PerFactor).unwrap();
            if !pool.contains(&s) {
                break s;
            }
        };
        assert!(matches!(lookup.evaluate(&request(&outside), None), Err(EvalError::Miss(_))));
    }

    #[test]
    fn file_filter_by_dataset() {
        let space = SearchSpaceConfig::default();
        let layout = FeatureLayout::new(&space).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");
        write_bench_file(&path, &table(&space, 10), &layout).unwrap();
        let all = BenchLookup::from_file(&path, &space, None).unwrap();
        let a = BenchLookup::from_file(&path, &space, Some("a")).unwrap();
        assert_eq!((all.len(), a.len()), (10, 5));
        let other_space = SearchSpaceConfig { encoder_enabled: false, ..SearchSpaceConfig::default() };
        assert!(matches!(BenchLookup::from_file(&path, &other_space, None), Err(BenchError::Layout { .. })));
    }
}
