//! Generates architecture/score tables from the synthetic benchmark, in the
//! shape of a released bench dataset: per dataset, some architectures found
//! by the guided search ("ours") and some drawn at random.

use serde::{Deserialize, Serialize};

use crate::benchdata::{BenchRecord, Method};
use crate::engine::{EngineError, RunConfig, RunMode, Runner, SearchConfig, TrainedRecord};
use crate::evaluators::SyntheticBench;
use crate::exec::Exec;
use crate::search_space::SearchSpaceConfig;
use crate::surrogate::PredictorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub method: Method,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthPlan {
    pub cells: Vec<Cell>,
    pub seed: u64,
    pub noise_std: f64,
    /// Initial random batch of each guided run; the rest of an "ours" cell
    /// is filled by iterations of `l_candidates`.
    pub n_init: usize,
    pub n_iter: usize,
    pub l_candidates: usize,
    pub predictor: PredictorConfig,
}

impl Default for SynthPlan {
    fn default() -> Self {
        Self::released_layout()
    }
}

impl SynthPlan {
    /// 400 guided architectures for each of six datasets plus 400 random
    /// ones for the first two: 3200 records.
    pub fn released_layout() -> Self {
        let datasets = ["RBchurn", "ABank", "AmEx", "AGE", "VBank", "TaoBao"];
        let mut cells: Vec<Cell> =
            datasets.iter().map(|d| Cell { dataset: d.to_string(), method: Method::Ours, count: 400 }).collect();
        cells.extend(datasets[..2].iter().map(|d| Cell { dataset: d.to_string(), method: Method::Random, count: 400 }));
        Self {
            cells,
            seed: 0,
            noise_std: 0.01,
            n_init: 100,
            n_iter: 100,
            l_candidates: 15,
            predictor: PredictorConfig::default(),
        }
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }
}

fn dataset_seed(base: u64, dataset: &str) -> u64 {
    let digest = crate::search_space::sha256_hex(format!("{base}:{dataset}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Runs every cell on the synthetic benchmark of its dataset.
pub fn synthesize(space: &SearchSpaceConfig, plan: &SynthPlan, exec: Exec) -> Result<Vec<BenchRecord>, EngineError> {
    let mut out = Vec::with_capacity(plan.total());
    for cell in &plan.cells {
        let seed = dataset_seed(plan.seed, &cell.dataset);
        let bench = SyntheticBench::new(space, seed, plan.noise_std)?.with_prediction_rows(0);
        let mut search = SearchConfig { seed, kd_enabled: false, ..SearchConfig::default() };
        let mode = match cell.method {
            Method::Random => RunMode::Random { budget: cell.count, kd_enabled: false },
            Method::Ours => {
                // The guided run must land exactly on `count` records.
                let n_init = plan.n_init.min(cell.count);
                let rest = cell.count - n_init;
                let l = plan.l_candidates.clamp(1, rest.max(1));
                if rest % l != 0 {
                    return Err(EngineError::Config(format!(
                        "cell {}/{}: {} records do not split into {n_init} + k*{l}",
                        cell.dataset, cell.method, cell.count
                    )));
                }
                search.n_init = n_init;
                search.l_candidates = l;
                search.n_iter = plan.n_iter.max(l);
                search.m_iterations = (rest / l).max(1);
                if rest == 0 {
                    // Nothing to iterate: the cell is just the initial batch.
                    let budget = RunMode::Random { budget: n_init, kd_enabled: false };
                    out.extend(run_cell(space, plan, search, budget, &bench, cell, exec)?);
                    continue;
                }
                RunMode::Search
            }
        };
        out.extend(run_cell(space, plan, search, mode, &bench, cell, exec)?);
    }
    Ok(out)
}

fn run_cell(
    space: &SearchSpaceConfig,
    plan: &SynthPlan,
    search: SearchConfig,
    mode: RunMode,
    bench: &SyntheticBench,
    cell: &Cell,
    exec: Exec,
) -> Result<Vec<BenchRecord>, EngineError> {
    let config = RunConfig { search, space: space.clone(), predictor: plan.predictor.clone(), mode, evaluator: None };
    let epochs = config.search.epochs;
    let state = Runner::new(bench).exec(exec).start(config, None)?;
    Ok(state.records.into_iter().map(|r: TrainedRecord| BenchRecord {
        dataset: cell.dataset.clone(),
        method: cell.method,
        avec: r.avec.bits,
        spec: Some(r.spec),
        best_score: r.score,
        metric_name: r.metric_name,
        epochs: Some(epochs),
    }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchdata::partition_counts;
    use crate::surrogate::GbdtParams;

    #[test]
    fn small_plan_counts() {
        let plan = SynthPlan {
            cells: vec![
                Cell { dataset: "x".into(), method: Method::Ours, count: 16 },
                Cell { dataset: "x".into(), method: Method::Random, count: 7 },
                Cell { dataset: "y".into(), method: Method::Ours, count: 5 },
            ],
            n_init: 10,
            n_iter: 12,
            l_candidates: 3,
            predictor: PredictorConfig { bag_count: 2, gbdt: GbdtParams { trees: 10, ..Default::default() }, ..Default::default() },
            ..SynthPlan::default()
        };
        let recs = synthesize(&SearchSpaceConfig::default(), &plan, Exec::Parallel).unwrap();
        let counts = partition_counts(&recs);
        assert_eq!(counts[&("x".to_string(), Method::Ours)], 16);
        assert_eq!(counts[&("x".to_string(), Method::Random)], 7);
        assert_eq!(counts[&("y".to_string(), Method::Ours)], 5);
        let bad = SynthPlan { cells: vec![Cell { dataset: "z".into(), method: Method::Ours, count: 14 }], ..plan };
        assert!(matches!(synthesize(&SearchSpaceConfig::default(), &bad, Exec::Parallel), Err(EngineError::Config(_))));
    }

    #[test]
    fn released_layout_is_3200() {
        let plan = SynthPlan::released_layout();
        assert_eq!(plan.total(), 3200);
        assert_eq!(plan.cells.len(), 8);
    }
}
