//! Replication verdicts and their agreement with human replications.
//!
//! A study counts as replicated when its effect is significant at `alpha`
//! and points the way the plan expects. Discarded cells are unusable and
//! drop out of the confusion matrix; undefined (zero-variance) estimates
//! are ordinary failures to replicate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::Discarded;
use crate::stats::EffectEstimate;
use crate::study::{AnalysisPlan, Direction, GroundTruth, HumanReplication};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Replicated,
    NotReplicated,
    Unusable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub study: String,
    pub outcome: Outcome,
    pub estimate: Option<EffectEstimate>,
    pub reason: String,
}

/// Decide one study. `evidence` is the estimate, or the discard that
/// prevented one.
pub fn decide(
    study: &str,
    evidence: Result<&EffectEstimate, &Discarded>,
    plan: &AnalysisPlan,
    alpha: f64,
) -> Verdict {
    debug_assert!(alpha > 0.0 && alpha < 1.0);
    let estimate = match evidence {
        Err(d) => {
            return Verdict {
                study: study.to_string(),
                outcome: Outcome::Unusable,
                estimate: None,
                reason: format!("discarded ({}): {}", d.reason, d.detail),
            }
        }
        Ok(e) => e,
    };
    let (outcome, reason) = match (estimate.signed_effect(), estimate.p_value) {
        (Some(effect), Some(p)) if estimate.is_ok() => {
            let direction = Direction::of(effect);
            let significant = p < alpha;
            match (significant, direction == Some(plan.expected_direction)) {
                (true, true) => (Outcome::Replicated, format!("p = {p:.3e} < {alpha} in the expected direction")),
                (true, false) => (Outcome::NotReplicated, format!("p = {p:.3e} < {alpha} but opposite direction")),
                (false, _) => (Outcome::NotReplicated, format!("p = {p:.3e} >= {alpha}")),
            }
        }
        _ => (
            Outcome::NotReplicated,
            "no effect could be calculated (zero variance)".to_string(),
        ),
    };
    Verdict { study: study.to_string(), outcome, estimate: Some(estimate.clone()), reason }
}

/// Confusion matrix with replicated as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub studies_evaluated: usize,
    pub unusable: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl AggregateMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize, unusable: usize) -> Self {
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            // 2PR/(P+R) written in counts; zero when tp = 0 but errors exist
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            studies_evaluated: tp + fp + fn_ + tn,
            unusable,
        }
    }

    /// Same verdicts scored with not-replicated as the positive class.
    pub fn complement(&self) -> Self {
        Self::from_counts(self.tn, self.fn_, self.fp, self.tp, self.unusable)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no ground truth for evaluated study `{0}`")]
pub struct MissingTruth(pub String);

/// Score verdicts against human replication outcomes.
pub fn aggregate(
    verdicts: &[Verdict],
    truths: &BTreeMap<String, GroundTruth>,
) -> Result<AggregateMetrics, MissingTruth> {
    let (mut tp, mut fp, mut fn_, mut tn, mut unusable) = (0, 0, 0, 0, 0);
    for v in verdicts {
        if v.outcome == Outcome::Unusable {
            unusable += 1;
            continue;
        }
        let truth = truths.get(&v.study).ok_or_else(|| MissingTruth(v.study.clone()))?;
        let predicted = v.outcome == Outcome::Replicated;
        let actual = truth.human_replication == HumanReplication::Replicated;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(AggregateMetrics::from_counts(tp, fp, fn_, tn, unusable))
}
