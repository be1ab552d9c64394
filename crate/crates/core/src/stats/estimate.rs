use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    chi_squared_test, cohens_d, cohens_q, fisher_z_test, odds_ratio, pearson_r, t_test,
    two_proportion_z, Degeneracy, StatsError, TwoByTwo,
};
use crate::sampling::SyntheticSample;
use crate::study::{EffectKind, Measure, StudySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateState {
    Ok,
    UndefinedZeroVariance,
}

/// Effect size and two-sided p-value for one study cell. `value` and
/// `p_value` are present exactly when `state` is `ok`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub effect_type: EffectKind,
    pub value: Option<f64>,
    pub p_value: Option<f64>,
    /// Test statistic (t, χ² or z).
    pub statistic: Option<f64>,
    pub n1: usize,
    pub n2: usize,
    pub state: EstimateState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degeneracy: Option<Degeneracy>,
}

impl EffectEstimate {
    fn ok(effect_type: EffectKind, value: f64, statistic: f64, p: f64, n1: usize, n2: usize) -> Self {
        Self {
            effect_type,
            value: Some(value),
            p_value: Some(p),
            statistic: Some(statistic),
            n1,
            n2,
            state: EstimateState::Ok,
            degeneracy: None,
        }
    }

    fn undefined(effect_type: EffectKind, why: Degeneracy, n1: usize, n2: usize) -> Self {
        Self {
            effect_type,
            value: None,
            p_value: None,
            statistic: None,
            n1,
            n2,
            state: EstimateState::UndefinedZeroVariance,
            degeneracy: Some(why),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.state == EstimateState::Ok
    }

    /// Value minus its null on the additive scale (log for odds ratios).
    pub fn signed_effect(&self) -> Option<f64> {
        let v = self.value?;
        Some(match self.effect_type {
            EffectKind::OddsRatio => v.ln(),
            EffectKind::CohensD | EffectKind::CohensQ => v,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error("sample for condition `{found}` does not match study condition `{expected}`")]
    ConditionMismatch { expected: String, found: String },
    #[error("question `{0}` in the plan has no scale")]
    UnknownQuestion(String),
    #[error("label {label:?} is not on the scale of `{question}`")]
    UnknownLabel { question: String, label: char },
    #[error("plan for `{0}` has no success labels")]
    MissingBinarization(String),
    #[error(transparent)]
    Stats(StatsError),
}

/// Map a stats result into either a value or the undefined state.
enum Outcome<T> {
    Value(T),
    Undefined(Degeneracy),
}

fn settle<T>(r: Result<T, StatsError>) -> Result<Outcome<T>, EstimateError> {
    match r {
        Ok(v) => Ok(Outcome::Value(v)),
        Err(StatsError::Undefined(why)) => Ok(Outcome::Undefined(why)),
        // too few retained respondents to compute a spread
        Err(StatsError::TooFew { .. }) => Ok(Outcome::Undefined(Degeneracy::ZeroVariance)),
        Err(e) => Err(EstimateError::Stats(e)),
    }
}

macro_rules! take {
    ($e:expr, $kind:expr, $n1:expr, $n2:expr) => {
        match settle($e)? {
            Outcome::Value(v) => v,
            Outcome::Undefined(why) => return Ok(EffectEstimate::undefined($kind, why, $n1, $n2)),
        }
    };
}

fn coded(study: &StudySpec, sample: &SyntheticSample, question: &str) -> Result<Vec<f64>, EstimateError> {
    let scale = study
        .scale_of(question)
        .ok_or_else(|| EstimateError::UnknownQuestion(question.to_string()))?;
    sample
        .records
        .iter()
        .map(|r| {
            let label = *r
                .answers
                .get(question)
                .ok_or_else(|| EstimateError::UnknownQuestion(question.to_string()))?;
            scale.value_of(label).ok_or(EstimateError::UnknownLabel {
                question: question.to_string(),
                label,
            })
        })
        .collect()
}

fn successes(study: &StudySpec, sample: &SyntheticSample, question: &str) -> Result<Vec<f64>, EstimateError> {
    let success = study
        .plan
        .variable_map
        .success_labels
        .as_deref()
        .ok_or_else(|| EstimateError::MissingBinarization(study.id.clone()))?;
    sample
        .records
        .iter()
        .map(|r| {
            let label = r
                .answers
                .get(question)
                .ok_or_else(|| EstimateError::UnknownQuestion(question.to_string()))?;
            Ok(if success.contains(label) { 1.0 } else { 0.0 })
        })
        .collect()
}

fn first_question<'a>(study: &'a StudySpec, condition: &str) -> Result<&'a str, EstimateError> {
    study
        .analysed_questions(condition)
        .first()
        .map(String::as_str)
        .ok_or_else(|| EstimateError::UnknownQuestion(format!("<none for {condition}>")))
}

/// Estimate the study's effect from its two retained samples, ordered as
/// the study's conditions. The effect is signed as first minus second.
pub fn estimate_effect(
    samples: &[SyntheticSample; 2],
    study: &StudySpec,
) -> Result<EffectEstimate, EstimateError> {
    for (sample, cond) in samples.iter().zip(&study.conditions) {
        if sample.condition != cond.id {
            return Err(EstimateError::ConditionMismatch {
                expected: cond.id.clone(),
                found: sample.condition.clone(),
            });
        }
    }
    let [s1, s2] = samples;
    let (n1, n2) = (s1.records.len(), s2.records.len());
    let (c1, c2) = (&study.conditions[0].id, &study.conditions[1].id);
    let kind = study.plan.effect;

    match study.plan.measure {
        Measure::TwoGroupMean => {
            let x = coded(study, s1, first_question(study, c1)?)?;
            let y = coded(study, s2, first_question(study, c2)?)?;
            let d = take!(cohens_d(&x, &y), kind, n1, n2);
            let t = take!(t_test(&x, &y), kind, n1, n2);
            Ok(EffectEstimate::ok(kind, d, t.t, t.p_value, n1, n2))
        }
        Measure::TwoByTwoCounts => {
            let x = successes(study, s1, first_question(study, c1)?)?;
            let y = successes(study, s2, first_question(study, c2)?)?;
            let count = |v: &[f64]| v.iter().filter(|&&s| s == 1.0).count() as u64;
            let (a, c) = (count(&x), count(&y));
            let table = TwoByTwo::new(a, n1 as u64 - a, c, n2 as u64 - c);
            let or = take!(odds_ratio(&table), kind, n1, n2);
            let chi = take!(chi_squared_test(&table), kind, n1, n2);
            Ok(EffectEstimate::ok(kind, or, chi.statistic, chi.p_value, n1, n2))
        }
        Measure::CorrelationPair => {
            let pair = |sample: &SyntheticSample, cond: &str| -> Result<(Vec<f64>, Vec<f64>), EstimateError> {
                let qs = study.analysed_questions(cond);
                if qs.len() != 2 {
                    return Err(EstimateError::UnknownQuestion(format!("pair for {cond}")));
                }
                Ok((coded(study, sample, &qs[0])?, coded(study, sample, &qs[1])?))
            };
            let (x1, y1) = pair(s1, c1)?;
            let (x2, y2) = pair(s2, c2)?;
            let r1 = take!(pearson_r(&x1, &y1), kind, n1, n2);
            let r2 = take!(pearson_r(&x2, &y2), kind, n1, n2);
            let q = take!(cohens_q(r1, r2), kind, n1, n2);
            let z = take!(fisher_z_test(r1, n1, r2, n2), kind, n1, n2);
            Ok(EffectEstimate::ok(kind, q, z.z, z.p_value, n1, n2))
        }
        Measure::TwoGroupProportion => {
            let x = successes(study, s1, first_question(study, c1)?)?;
            let y = successes(study, s2, first_question(study, c2)?)?;
            let d = take!(cohens_d(&x, &y), kind, n1, n2);
            let sum = |v: &[f64]| v.iter().sum::<f64>() as u64;
            let z = take!(two_proportion_z(sum(&x), n1 as u64, sum(&y), n2 as u64), kind, n1, n2);
            Ok(EffectEstimate::ok(kind, d, z.z, z.p_value, n1, n2))
        }
    }
}
