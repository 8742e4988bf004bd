//! The search loop, the random-search baseline, resumable runs and reports.
//!
//! A run advances in batches. For the guided search the first batch is the
//! `n_init` random architectures and every later batch is one iteration:
//! sample `n_iter` untrained candidates, refit the predictor on every record
//! so far, pick `l_candidates` by Thompson sampling and evaluate them. The
//! random baseline evaluates `parallelism` fresh architectures per batch.
//! After each batch the new records and the RNG position are persisted, so
//! an interrupted run resumes into exactly the same sequence.

mod report;
mod store;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avec::{FeatureLayout, FeatureVector};
use crate::distill::{select_teachers, DistillError, PredictionCache};
use crate::evaluators::{EvalError, EvalRequest, EvalResult, Evaluator, EvaluatorConfig};
use crate::exec::{with_threads, Exec};
use crate::search_space::{
    canonical_id, sha256_hex, ArchId, ArchitectureSpec, ConfigError, SamplingMode, SearchSpaceConfig,
};
use crate::selector::{thompson_select, SelectError};
use crate::surrogate::{self, FeatureMatrix, PredictorConfig, SurrogateError, MIN_TRAINING_ROWS};

pub use report::{best_record, report_top3_curve, top_k_curve, ReportError};
pub use store::{StateStore, CONFIG_FILE, LOCK_FILE, PREDICTIONS_DIR, RECORDS_FILE, RNG_FILE};

/// Rejection-sampling attempts allowed per requested fresh architecture.
pub const ATTEMPTS_PER_CANDIDATE: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_init: usize,
    pub n_iter: usize,
    pub m_iterations: usize,
    pub l_candidates: usize,
    pub kd_enabled: bool,
    pub kd_start_after: usize,
    pub kd_top_k: usize,
    pub kd_weight: f64,
    pub seed: u64,
    pub parallelism: usize,
    pub sampling_mode: SamplingMode,
    pub epochs: u32,
    pub max_retries: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_init: 100,
            n_iter: 100,
            m_iterations: 40,
            l_candidates: 15,
            kd_enabled: true,
            kd_start_after: 30,
            kd_top_k: 3,
            kd_weight: 1.0,
            seed: 0,
            parallelism: 1,
            sampling_mode: SamplingMode::PerFactor,
            epochs: 10,
            max_retries: 2,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_owned()));
        if self.n_init < MIN_TRAINING_ROWS {
            return bad(&format!("n_init must be at least {MIN_TRAINING_ROWS} to fit the predictor"));
        }
        if self.n_iter == 0 || self.m_iterations == 0 || self.l_candidates == 0 {
            return bad("n_iter, m_iterations and l_candidates must be positive");
        }
        if self.l_candidates > self.n_iter {
            return bad("l_candidates must not exceed n_iter");
        }
        if self.kd_top_k == 0 {
            return bad("kd_top_k must be at least 1");
        }
        if !(self.kd_weight.is_finite() && self.kd_weight >= 0.0) {
            return bad("kd_weight must be a non-negative number");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        Ok(())
    }

    /// Records a completed guided search holds.
    pub fn total_budget(&self) -> usize {
        self.n_init + self.m_iterations * self.l_candidates
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RunMode {
    Search,
    Random { budget: usize, kd_enabled: bool },
}

/// Everything needed to reproduce a run; stored as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub space: SearchSpaceConfig,
    pub predictor: PredictorConfig,
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator: Option<EvaluatorConfig>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.search.validate()?;
        self.space.validate()?;
        self.predictor.validate()?;
        if let RunMode::Random { budget: 0, .. } = self.mode {
            return Err(EngineError::Config("budget must be positive".into()));
        }
        Ok(())
    }

    /// Number of records the finished run holds.
    pub fn target_records(&self) -> usize {
        match self.mode {
            RunMode::Search => self.search.total_budget(),
            RunMode::Random { budget, .. } => budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedRecord {
    pub arch_id: ArchId,
    pub spec: ArchitectureSpec,
    pub avec: FeatureVector,
    pub score: f64,
    pub metric_name: String,
    #[serde(default)]
    pub preds_ref: Option<ArchId>,
    pub epoch_count: u32,
    pub wall_seconds: f64,
    /// Teachers whose predictions were distilled into this model.
    #[serde(default)]
    pub teacher_ids: Vec<ArchId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub config: RunConfig,
    /// Completed iterations (guided search) or batches (random search),
    /// not counting the initial batch.
    pub iteration: usize,
    pub records: Vec<TrainedRecord>,
    pub rng: ChaCha8Rng,
    pub complete: bool,
}

impl SearchState {
    pub fn new(config: RunConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.search.seed);
        Self { config, iteration: 0, records: Vec::new(), rng, complete: false }
    }

    pub fn best(&self) -> Option<&TrainedRecord> {
        best_record(&self.records)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] ConfigError),
    #[error("evaluation of {arch_id} failed: {source}")]
    Eval { arch_id: ArchId, source: Box<EvalError> },
    #[error("could only find {found} of {wanted} untrained architectures after {attempts} draws")]
    Exhausted { wanted: usize, found: usize, attempts: usize },
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error("state integrity check failed ({reason}): {}", files.join(", "))]
    Integrity { files: Vec<String>, reason: String },
    #[error("state directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("state directory {0} already holds a run; resume it instead")]
    Exists(PathBuf),
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Per-architecture training seed, independent of batch order.
fn eval_seed(run_seed: u64, id: &ArchId) -> u64 {
    let digest = sha256_hex(format!("{run_seed}:{id}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

fn is_retryable(e: &EvalError) -> bool {
    matches!(e, EvalError::Transport(_) | EvalError::Timeout(_))
}

/// Drives runs against one evaluator.
pub struct Runner<'a> {
    evaluator: &'a dyn Evaluator,
    exec: Exec,
    max_batches: Option<usize>,
}

impl<'a> Runner<'a> {
    pub fn new(evaluator: &'a dyn Evaluator) -> Self {
        Self { evaluator, exec: Exec::default(), max_batches: None }
    }

    /// Execution mode for predictor fitting, prediction and batch evaluation.
    pub fn exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Stops after this many batches in one call, leaving the state
    /// incomplete (as if the process had been killed there).
    pub fn max_batches(mut self, n: usize) -> Self {
        self.max_batches = Some(n);
        self
    }

    /// Starts a new run, persisted to `state_dir` when given.
    pub fn start(&self, config: RunConfig, state_dir: Option<&Path>) -> Result<SearchState, EngineError> {
        config.validate()?;
        let mut state = SearchState::new(config);
        match state_dir {
            Some(dir) => {
                let store = StateStore::create(dir, &state)?;
                self.drive(&mut state, Some(&store))?;
            }
            None => self.drive(&mut state, None)?,
        }
        Ok(state)
    }

    /// Continues a persisted run from its last completed batch.
    pub fn resume(&self, state_dir: &Path) -> Result<SearchState, EngineError> {
        let (store, mut state) = StateStore::open(state_dir)?;
        state.config.validate()?;
        self.drive(&mut state, Some(&store))?;
        Ok(state)
    }

    fn drive(&self, state: &mut SearchState, store: Option<&StateStore>) -> Result<(), EngineError> {
        let layout = FeatureLayout::new(&state.config.space)?;
        let pool = self.evaluator.candidate_pool();
        let cache = store.map(|s| s.cache());
        let mut trained: HashSet<ArchId> = state.records.iter().map(|r| r.arch_id.clone()).collect();
        let mut batches = 0usize;
        while !state.complete {
            if self.max_batches.is_some_and(|m| batches >= m) {
                return Ok(());
            }
            let cfg = state.config.search.clone();
            let done = state.records.len();
            let plan = match state.config.mode.clone() {
                RunMode::Search if done == 0 => {
                    Some((sample_fresh(state, &trained, pool.as_deref(), cfg.n_init)?, cfg.kd_enabled))
                }
                RunMode::Search if state.iteration < cfg.m_iterations => {
                    let candidates = sample_fresh(state, &trained, pool.as_deref(), cfg.n_iter)?;
                    let chosen = self.select(state, &layout, &candidates)?;
                    Some((chosen.into_iter().map(|i| candidates[i].clone()).collect(), cfg.kd_enabled))
                }
                RunMode::Random { budget, kd_enabled } if done < budget => {
                    let n = cfg.parallelism.min(budget - done);
                    Some((sample_fresh(state, &trained, pool.as_deref(), n)?, kd_enabled))
                }
                _ => None,
            };
            let Some((batch, kd_enabled)) = plan else {
                state.complete = true;
                if let Some(store) = store {
                    store.save_progress(state)?;
                }
                break;
            };
            let teachers = match cache {
                Some(cache) if kd_enabled && done >= cfg.kd_start_after => {
                    teacher_ids(&state.records, cfg.kd_top_k, cache)?
                }
                _ => Vec::new(),
            };
            let new_records = self.evaluate_batch(&cfg, &layout, batch, &teachers, cache)?;
            trained.extend(new_records.iter().map(|r| r.arch_id.clone()));
            if let Some(store) = store {
                store.append_records(&new_records)?;
            }
            state.records.extend(new_records);
            if done > 0 || matches!(state.config.mode, RunMode::Random { .. }) {
                state.iteration += 1;
            }
            if let Some(store) = store {
                store.save_progress(state)?;
            }
            batches += 1;
            log::info!("batch {batches}: {} records, best {:?}", state.records.len(), state.best().map(|r| r.score));
        }
        Ok(())
    }

    /// Refits the predictor on all records and picks `l_candidates` indices.
    fn select(
        &self,
        state: &mut SearchState,
        layout: &FeatureLayout,
        candidates: &[(ArchId, ArchitectureSpec)],
    ) -> Result<Vec<usize>, EngineError> {
        let train = FeatureMatrix::from_rows(
            layout.fingerprint(),
            layout.len(),
            state.records.iter().map(|r| &r.avec),
        )?;
        let scores = state.scores();
        let model = surrogate::fit_with(&train, &scores, &state.config.predictor, &mut state.rng, self.exec)?;
        let mut cand = FeatureMatrix::new(layout.fingerprint(), layout.len());
        for (_, spec) in candidates {
            cand.push(&layout.encode_unchecked(spec).bits)?;
        }
        let predictions = model.predict_with(&cand, self.exec)?;
        Ok(thompson_select(&predictions, state.config.search.l_candidates, &mut state.rng)?)
    }

    fn evaluate_batch(
        &self,
        cfg: &SearchConfig,
        layout: &FeatureLayout,
        batch: Vec<(ArchId, ArchitectureSpec)>,
        teachers: &[ArchId],
        cache: Option<&PredictionCache>,
    ) -> Result<Vec<TrainedRecord>, EngineError> {
        let requests: Vec<EvalRequest> = batch
            .into_iter()
            .map(|(arch_id, spec)| EvalRequest {
                seed: eval_seed(cfg.seed, &arch_id),
                arch_id,
                spec,
                teacher_ids: teachers.to_vec(),
                kd_weight: if teachers.is_empty() { 0.0 } else { cfg.kd_weight },
                epochs: cfg.epochs,
            })
            .collect();
        let exec = if cfg.parallelism > 1 { self.exec } else { Exec::Sequential };
        let outcomes = with_threads(cfg.parallelism, || {
            exec.map_slice(&requests, |req| {
                let started = Instant::now();
                self.evaluate_with_retries(req, cfg.max_retries, cache).map(|res| (res, started.elapsed()))
            })
        });
        // Committed in request order, whatever order they finished in.
        requests
            .into_iter()
            .zip(outcomes)
            .map(|(req, outcome)| {
                let (res, elapsed) = outcome?;
                Ok(TrainedRecord {
                    avec: layout.encode_unchecked(&req.spec),
                    arch_id: req.arch_id,
                    spec: req.spec,
                    score: res.score,
                    metric_name: res.metric_name,
                    preds_ref: res.preds_ref,
                    epoch_count: res.per_epoch.len() as u32,
                    wall_seconds: elapsed.as_secs_f64(),
                    teacher_ids: req.teacher_ids,
                })
            })
            .collect()
    }

    fn evaluate_with_retries(
        &self,
        req: &EvalRequest,
        max_retries: u32,
        cache: Option<&PredictionCache>,
    ) -> Result<EvalResult, EngineError> {
        let mut attempt = 0;
        loop {
            let outcome = self.evaluator.evaluate(req, cache).and_then(|res| {
                if res.arch_id != req.arch_id {
                    return Err(EvalError::Correlation { expected: req.arch_id.clone(), got: res.arch_id.to_string() });
                }
                res.check()?;
                Ok(res)
            });
            match outcome {
                Ok(res) => return Ok(res),
                Err(e) if attempt < max_retries && is_retryable(&e) => {
                    attempt += 1;
                    log::warn!("retrying {} ({attempt}/{max_retries}): {e}", req.arch_id);
                }
                Err(source) => return Err(EngineError::Eval { arch_id: req.arch_id.clone(), source: Box::new(source) }),
            }
        }
    }
}

/// `count` distinct architectures absent from `trained`, by rejection.
fn sample_fresh(
    state: &mut SearchState,
    trained: &HashSet<ArchId>,
    pool: Option<&[ArchitectureSpec]>,
    count: usize,
) -> Result<Vec<(ArchId, ArchitectureSpec)>, EngineError> {
    let space = &state.config.space;
    let mode = state.config.search.sampling_mode;
    let max_attempts = ATTEMPTS_PER_CANDIDATE * count;
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= max_attempts {
            return Err(EngineError::Exhausted { wanted: count, found: out.len(), attempts });
        }
        attempts += 1;
        let spec = match pool {
            Some([]) => break,
            Some(pool) => pool[state.rng.random_range(0..pool.len())].clone(),
            None => space.sample(&mut state.rng, mode)?,
        };
        let id = canonical_id(&spec, space).map_err(|e| EngineError::Config(e.to_string()))?;
        if trained.contains(&id) || !seen.insert(id.clone()) {
            continue;
        }
        out.push((id, spec.canonicalized()));
    }
    if out.len() < count {
        return Err(EngineError::Exhausted { wanted: count, found: out.len(), attempts });
    }
    Ok(out)
}

/// Top `k` records by score among those with cached predictions.
fn teacher_ids(records: &[TrainedRecord], k: usize, cache: &PredictionCache) -> Result<Vec<ArchId>, EngineError> {
    let eligible: Vec<TrainedRecord> =
        records.iter().filter(|r| r.preds_ref.as_ref().is_some_and(|p| cache.contains(p))).cloned().collect();
    if eligible.is_empty() {
        return Ok(Vec::new());
    }
    Ok(select_teachers(&eligible, k, cache)?.teacher_ids)
}

/// Runs the guided search to completion.
pub fn run_search(
    cfg: &SearchConfig,
    space: &SearchSpaceConfig,
    predictor: &PredictorConfig,
    evaluator: &dyn Evaluator,
    state_dir: Option<&Path>,
) -> Result<SearchState, EngineError> {
    let config = RunConfig {
        search: cfg.clone(),
        space: space.clone(),
        predictor: predictor.clone(),
        mode: RunMode::Search,
        evaluator: None,
    };
    Runner::new(evaluator).start(config, state_dir)
}

/// Evaluates `budget` distinct random architectures.
pub fn run_random_search(
    budget: usize,
    kd_enabled: bool,
    cfg: &SearchConfig,
    space: &SearchSpaceConfig,
    evaluator: &dyn Evaluator,
    state_dir: Option<&Path>,
) -> Result<SearchState, EngineError> {
    let config = RunConfig {
        search: cfg.clone(),
        space: space.clone(),
        predictor: PredictorConfig::default(),
        mode: RunMode::Random { budget, kd_enabled },
        evaluator: None,
    };
    Runner::new(evaluator).start(config, state_dir)
}

pub fn resume(state_dir: &Path, evaluator: &dyn Evaluator) -> Result<SearchState, EngineError> {
    Runner::new(evaluator).resume(state_dir)
}
