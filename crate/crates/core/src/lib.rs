//! Predictor-guided architecture search for event-sequence classifiers.
//!
//! The pieces, bottom up:
//!
//! * [`search_space`]: the discrete space of stem / encoder / decoder / head
//!   choices, with validation, sampling and exact counting.
//! * [`avec`]: the binary path encoding used as surrogate input.
//! * [`surrogate`]: ensemble regressors returning a mean score and an
//!   uncertainty per architecture.
//! * [`selector`]: batch Thompson sampling over those predictions.
//! * [`distill`]: the teacher prediction cache and distillation targets.
//! * [`evaluators`]: synthetic, table-lookup and external-trainer backends.
//! * [`engine`]: the search loop, random-search baseline, resumable state
//!   and curve reports.
//! * [`benchdata`]: architecture/score dataset files and summaries.
//! * [`synthbench`]: bench tables generated from the synthetic backend.

pub mod avec;
pub mod benchdata;
pub mod distill;
pub mod engine;
pub mod evaluators;
pub mod exec;
pub mod search_space;
pub mod selector;
pub mod surrogate;
pub mod synthbench;

pub use avec::{FeatureLayout, FeatureVector};
pub use exec::Exec;
pub use search_space::{ArchId, ArchitectureSpec, SamplingMode, SearchSpaceConfig};
