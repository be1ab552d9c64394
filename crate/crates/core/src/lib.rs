//! Synthetic-respondent replication harness.
//!
//! Loads behavioural study definitions, draws synthetic samples from a
//! text-generation backend, estimates each study's effect, and scores the
//! resulting replication verdicts against human replication outcomes.

pub mod backends;
pub mod report;
pub mod sampling;
pub mod seed;
pub mod stats;
pub mod study;
pub mod verdict;

#[cfg(test)]
mod testutil;

pub use backends::{Backend, BackendError, GenerationRequest, MockRespondentModel};
pub use sampling::{PromptMode, SamplingConfig, SyntheticSample};
pub use stats::{EffectEstimate, EstimateState};
pub use study::{load_studies, StudySpec};
pub use verdict::{AggregateMetrics, Outcome, Verdict};
