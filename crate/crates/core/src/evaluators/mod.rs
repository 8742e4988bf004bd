//! Evaluation backends behind one trait: a deterministic synthetic
//! benchmark, lookup in a recorded architecture/score table, and a client
//! for an external trainer process speaking line-delimited JSON.

mod external;
mod lookup;
pub mod protocol;
mod synthetic;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::benchdata::BenchError;
use crate::distill::{DistillError, PredictionCache};
use crate::search_space::{ArchId, ArchitectureSpec, SearchSpaceConfig, SpecError};

pub use external::{serve_stub, ExternalEvaluator};
pub use lookup::BenchLookup;
pub use synthetic::SyntheticBench;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub arch_id: ArchId,
    pub spec: ArchitectureSpec,
    pub seed: u64,
    pub teacher_ids: Vec<ArchId>,
    pub kd_weight: f64,
    pub epochs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub arch_id: ArchId,
    /// Best score over epochs, higher is better.
    pub score: f64,
    pub metric_name: String,
    pub per_epoch: Vec<f64>,
    pub preds_ref: Option<ArchId>,
}

impl EvalResult {
    /// Checks `score == max(per_epoch)` when epochs are reported.
    pub fn check(&self) -> Result<(), EvalError> {
        if !self.score.is_finite() {
            return Err(EvalError::Protocol(format!("non-finite score for {}", self.arch_id)));
        }
        if let Some(best) = self.per_epoch.iter().copied().reduce(f64::max) {
            if best != self.score {
                return Err(EvalError::Protocol(format!(
                    "score {} is not the best epoch score {best}",
                    self.score
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    InvalidSpec(#[from] SpecError),
    #[error("architecture {0} is not in the table")]
    Miss(ArchId),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("response for {got} does not match request {expected}")]
    Correlation { expected: ArchId, got: String },
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("trainer error {code}: {message}")]
    Trainer { code: String, message: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Cache(#[from] DistillError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

pub trait Evaluator: Send + Sync {
    fn name(&self) -> &str;

    /// Evaluates one architecture. Backends that produce prediction matrices
    /// register them in `cache` when one is given.
    fn evaluate(&self, req: &EvalRequest, cache: Option<&PredictionCache>) -> Result<EvalResult, EvalError>;

    /// A finite set of architectures to draw candidates from, for backends
    /// that can only answer for a fixed table.
    fn candidate_pool(&self) -> Option<Vec<ArchitectureSpec>> {
        None
    }
}

/// Serializable backend selection, as stored in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvaluatorConfig {
    Synthetic {
        bench_seed: u64,
        #[serde(default)]
        noise_std: f64,
        /// Rows of the pseudo-logit matrix written per architecture; 0 disables.
        #[serde(default = "default_prediction_rows")]
        prediction_rows: usize,
    },
    Bench {
        path: PathBuf,
        #[serde(default)]
        dataset: Option<String>,
    },
    External {
        #[serde(default)]
        command: Option<Vec<String>>,
        #[serde(default)]
        address: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

fn default_prediction_rows() -> usize {
    32
}

fn default_timeout() -> f64 {
    3600.0
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig::Synthetic { bench_seed: 0, noise_std: 0.0, prediction_rows: default_prediction_rows() }
    }
}

impl EvaluatorConfig {
    /// `workers` is the number of trainer connections an external backend
    /// opens; the other backends ignore it.
    pub fn build(&self, space: &SearchSpaceConfig, workers: usize) -> Result<Box<dyn Evaluator>, EvalError> {
        Ok(match self {
            EvaluatorConfig::Synthetic { bench_seed, noise_std, prediction_rows } => Box::new(
                SyntheticBench::new(space, *bench_seed, *noise_std)
                    .map_err(|e| EvalError::Protocol(e.to_string()))?
                    .with_prediction_rows(*prediction_rows),
            ),
            EvaluatorConfig::Bench { path, dataset } => {
                Box::new(BenchLookup::from_file(path, space, dataset.as_deref())?)
            }
            EvaluatorConfig::External { command, address, timeout_secs } => {
                let timeout = Duration::from_secs_f64(*timeout_secs);
                match (command, address) {
                    (Some(cmd), None) => Box::new(ExternalEvaluator::spawn_pool(cmd, space, timeout, workers)?),
                    (None, Some(addr)) => Box::new(ExternalEvaluator::connect_pool(addr, space, timeout, workers)?),
                    _ => {
                        return Err(EvalError::Handshake(
                            "external evaluator needs exactly one of `command` or `address`".into(),
                        ))
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn result_check() {
        let id: ArchId = "a".repeat(64).parse().unwrap();
        let mut r = EvalResult {
            arch_id: id,
            score: 0.8,
            metric_name: "auc".into(),
            per_epoch: vec![0.5, 0.8, 0.7],
            preds_ref: None,
        };
        r.check().unwrap();
        r.score = 0.7;
        assert!(r.check().is_err());
        r.per_epoch.clear();
        r.check().unwrap();
    }

    #[test]
    fn config_json_shape() {
        let cfg: EvaluatorConfig =
            serde_json::from_str(r#"{"kind":"synthetic","bench_seed":3,"noise_std":0.01}"#).unwrap();
        assert_eq!(cfg, EvaluatorConfig::Synthetic { bench_seed: 3, noise_std: 0.01, prediction_rows: 32 });
        let ext: EvaluatorConfig =
            serde_json::from_str(r#"{"kind":"external","address":"127.0.0.1:9"}"#).unwrap();
        assert!(matches!(ext, EvaluatorConfig::External { timeout_secs, .. } if timeout_secs == 3600.0));
        let both = EvaluatorConfig::External { command: None, address: None, timeout_secs: 1.0 };
        assert!(both.build(&SearchSpaceConfig::default(), 1).is_err());
    }
}
