//! Score predictor with uncertainty: an ensemble whose member spread is the
//! uncertainty estimate. Two member kinds are available, a bootstrap bag of
//! least-absolute-deviation boosted trees (default) and independently
//! initialized MLP regressors.

mod checkpoint;
pub mod gbdt;
pub mod mlp;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::avec::FeatureVector;
use crate::exec::Exec;

pub use checkpoint::CheckpointError;
pub use gbdt::{GbdtParams, LadBooster};
pub use mlp::{Mlp, MlpParams};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SurrogateError {
    #[error("need at least {min} training rows, got {got}")]
    TooFewRows { min: usize, got: usize },
    #[error("score at row {0} is not finite")]
    NonFinite(usize),
    #[error("row {row} has {got} features, expected {expected}")]
    RowLength { row: usize, expected: usize, got: usize },
    #[error("feature layout {got} does not match model layout {expected}")]
    LayoutMismatch { expected: String, got: String },
    #[error("{rows} feature rows but {scores} scores")]
    Shape { rows: usize, scores: usize },
    #[error("invalid predictor config: {0}")]
    Config(String),
}

pub const MIN_TRAINING_ROWS: usize = 5;

/// Dense row-major 0/1 matrix tagged with the layout fingerprint it was
/// encoded under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMatrix {
    layout_fp: String,
    cols: usize,
    data: Vec<u8>,
}

impl FeatureMatrix {
    pub fn new(layout_fp: impl Into<String>, cols: usize) -> Self {
        Self { layout_fp: layout_fp.into(), cols, data: Vec::new() }
    }

    pub fn from_rows<'a, I>(layout_fp: &str, cols: usize, rows: I) -> Result<Self, SurrogateError>
    where
        I: IntoIterator<Item = &'a FeatureVector>,
    {
        let mut m = Self::new(layout_fp, cols);
        for v in rows {
            m.push(&v.bits)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[u8]) -> Result<(), SurrogateError> {
        if row.len() != self.cols {
            return Err(SurrogateError::RowLength {
                row: self.rows(),
                expected: self.cols,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout_fp(&self) -> &str {
        &self.layout_fp
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut m = Self::new(self.layout_fp.clone(), self.cols);
        for &i in indices {
            m.data.extend_from_slice(self.row(i));
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    #[default]
    GbdtBag,
    MlpEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub bag_count: usize,
    pub gbdt: GbdtParams,
    pub mlp: MlpParams,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::GbdtBag,
            bag_count: 8,
            gbdt: GbdtParams::default(),
            mlp: MlpParams::default(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::Config(m.to_owned()));
        if self.bag_count < 2 {
            return bad("bag_count must be at least 2");
        }
        let g = &self.gbdt;
        if g.trees == 0 || g.max_depth == 0 || g.min_samples_leaf == 0 || g.learning_rate.is_nan() || g.learning_rate <= 0.0 {
            return bad("gbdt hyperparameters must be positive");
        }
        let m = &self.mlp;
        if m.members < 2 {
            return bad("mlp members must be at least 2");
        }
        if m.epochs == 0 || m.batch_size == 0 || m.learning_rate.is_nan() || m.learning_rate <= 0.0 || m.hidden.contains(&0) {
            return bad("mlp hyperparameters must be positive");
        }
        Ok(())
    }

    fn members(&self) -> usize {
        match self.kind {
            PredictorKind::GbdtBag => self.bag_count,
            PredictorKind::MlpEnsemble => self.mlp.members,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub mean: f64,
    pub std: f64,
}

impl ScorePrediction {
    /// Mean and sample standard deviation (divisor `n - 1`) of member outputs.
    /// Identical members give exactly `(value, 0)`.
    pub fn from_members(values: &[f64]) -> Self {
        let first = values[0];
        if values.iter().all(|&v| v == first) {
            return Self { mean: first, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        let std = if values.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Members {
    Gbdt(Vec<LadBooster>),
    Mlp(Vec<Mlp>),
}

/// A fitted, immutable ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub(crate) layout_fp: String,
    pub(crate) n_features: usize,
    pub(crate) members: Members,
}

impl PredictorModel {
    pub fn member_count(&self) -> usize {
        match &self.members {
            Members::Gbdt(m) => m.len(),
            Members::Mlp(m) => m.len(),
        }
    }

    pub fn layout_fp(&self) -> &str {
        &self.layout_fp
    }

    /// Per-member predictions for one feature row.
    pub fn member_predictions(&self, row: &[u8]) -> Vec<f64> {
        match &self.members {
            Members::Gbdt(ms) => ms.iter().map(|m| m.predict(row)).collect(),
            Members::Mlp(ms) => ms.iter().map(|m| m.predict(row)).collect(),
        }
    }

    fn check(&self, features: &FeatureMatrix) -> Result<(), SurrogateError> {
        if features.layout_fp() != self.layout_fp || features.cols() != self.n_features {
            return Err(SurrogateError::LayoutMismatch {
                expected: self.layout_fp.clone(),
                got: features.layout_fp().to_owned(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<ScorePrediction>, SurrogateError> {
        self.predict_with(features, Exec::default())
    }

    pub fn predict_with(
        &self,
        features: &FeatureMatrix,
        exec: Exec,
    ) -> Result<Vec<ScorePrediction>, SurrogateError> {
        self.check(features)?;
        Ok(exec.map_indexed(features.rows(), |i| {
            ScorePrediction::from_members(&self.member_predictions(features.row(i)))
        }))
    }

    /// Mean absolute error of the predicted means.
    pub fn eval_mae(&self, features: &FeatureMatrix, scores: &[f64]) -> Result<f64, SurrogateError> {
        if features.rows() != scores.len() {
            return Err(SurrogateError::Shape { rows: features.rows(), scores: scores.len() });
        }
        let preds = self.predict(features)?;
        let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        Ok(mean_absolute_error(&means, scores))
    }
}

pub fn mean_absolute_error(predicted: &[f64], actual: &[f64]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let total: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum();
    total / predicted.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

pub(crate) fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits the configured ensemble. Member seeds are drawn from `rng` up front,
/// members are fitted (possibly in parallel) and kept in member-index order.
pub fn fit<R: RngCore + ?Sized>(
    features: &FeatureMatrix,
    scores: &[f64],
    cfg: &PredictorConfig,
    rng: &mut R,
) -> Result<PredictorModel, SurrogateError> {
    fit_with(features, scores, cfg, rng, Exec::default())
}

pub fn fit_with<R: RngCore + ?Sized>(
    features: &FeatureMatrix,
    scores: &[f64],
    cfg: &PredictorConfig,
    rng: &mut R,
    exec: Exec,
) -> Result<PredictorModel, SurrogateError> {
    cfg.validate()?;
    let n = features.rows();
    if n != scores.len() {
        return Err(SurrogateError::Shape { rows: n, scores: scores.len() });
    }
    if n < MIN_TRAINING_ROWS {
        return Err(SurrogateError::TooFewRows { min: MIN_TRAINING_ROWS, got: n });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(SurrogateError::NonFinite(i));
    }
    let seeds: Vec<u64> = (0..cfg.members()).map(|_| rng.random()).collect();
    let members = match cfg.kind {
        PredictorKind::GbdtBag => Members::Gbdt(exec.map_slice(&seeds, |&seed| {
            LadBooster::fit_bootstrap(features, scores, &cfg.gbdt, seed)
        })),
        PredictorKind::MlpEnsemble => Members::Mlp(exec.map_slice(&seeds, |&seed| {
            Mlp::fit(features, scores, &cfg.mlp, seed)
        })),
    };
    Ok(PredictorModel {
        layout_fp: features.layout_fp().to_owned(),
        n_features: features.cols(),
        members,
    })
}
