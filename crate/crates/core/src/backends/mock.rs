use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, GenerationRequest, TaggedQuestion};
use crate::seed::mix;
use crate::study::StudySpec;

/// Text returned for refused studies. Contains no single-letter word.
pub const REFUSAL_TEXT: &str =
    "Sorry, but this request touches on sensitive matters that cannot be answered here.";

/// Softmax of `logits / temperature`.
pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LogitKey {
    pub study: String,
    pub condition: String,
    pub question: String,
}

impl LogitKey {
    pub fn new(study: &str, condition: &str, question: &str) -> Self {
        Self {
            study: study.to_string(),
            condition: condition.to_string(),
            question: question.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogitEntry {
    study: String,
    condition: String,
    question: String,
    logits: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MockModelFile {
    #[serde(default)]
    invalid_rate: f64,
    #[serde(default)]
    refusal_studies: BTreeSet<String>,
    #[serde(default)]
    entries: Vec<LogitEntry>,
}

/// Offline respondent: each answer is drawn from a tempered softmax over
/// fixed per-question logits.
///
/// Draws use a ChaCha stream seeded from `(request seed, question slot)`,
/// so an answer depends only on the request and never on which worker
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MockModelFile", into = "MockModelFile")]
pub struct MockRespondentModel {
    logits: BTreeMap<LogitKey, Vec<f64>>,
    invalid_rate: f64,
    refusal_studies: BTreeSet<String>,
}

impl TryFrom<MockModelFile> for MockRespondentModel {
    type Error = String;

    fn try_from(file: MockModelFile) -> Result<Self, Self::Error> {
        let mut model = MockRespondentModel::new().with_invalid_rate(file.invalid_rate)?;
        model.refusal_studies = file.refusal_studies;
        for e in file.entries {
            let key = LogitKey { study: e.study, condition: e.condition, question: e.question };
            if e.logits.is_empty() || e.logits.iter().any(|l| !l.is_finite()) {
                return Err(format!("logits for {key:?} must be non-empty and finite"));
            }
            if model.logits.insert(key.clone(), e.logits).is_some() {
                return Err(format!("duplicate logits entry for {key:?}"));
            }
        }
        Ok(model)
    }
}

impl From<MockRespondentModel> for MockModelFile {
    fn from(m: MockRespondentModel) -> Self {
        MockModelFile {
            invalid_rate: m.invalid_rate,
            refusal_studies: m.refusal_studies,
            entries: m
                .logits
                .into_iter()
                .map(|(k, logits)| LogitEntry {
                    study: k.study,
                    condition: k.condition,
                    question: k.question,
                    logits,
                })
                .collect(),
        }
    }
}

impl Default for MockRespondentModel {
    fn default() -> Self {
        Self::new()
    }
}

impl MockRespondentModel {
    pub fn new() -> Self {
        Self { logits: BTreeMap::new(), invalid_rate: 0.0, refusal_studies: BTreeSet::new() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, BackendError> {
        toml::from_str(text).map_err(|e| BackendError::Config(format!("mock model: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("mock model always serializes")
    }

    pub fn with_invalid_rate(mut self, rate: f64) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(format!("invalid_rate must lie in [0, 1], got {rate}"));
        }
        self.invalid_rate = rate;
        Ok(self)
    }

    pub fn with_logits(mut self, key: LogitKey, logits: Vec<f64>) -> Self {
        self.logits.insert(key, logits);
        self
    }

    pub fn with_refusal(mut self, study: impl Into<String>) -> Self {
        self.refusal_studies.insert(study.into());
        self
    }

    pub fn invalid_rate(&self) -> f64 {
        self.invalid_rate
    }

    pub fn refuses(&self, study: &str) -> bool {
        self.refusal_studies.contains(study)
    }

    pub fn logits(&self, key: &LogitKey) -> Option<&[f64]> {
        self.logits.get(key).map(Vec::as_slice)
    }

    /// Tempered answer distribution for one question in one condition.
    pub fn answer_distribution(
        &self,
        study: &str,
        condition: &str,
        question: &str,
        temperature: f64,
    ) -> Result<Vec<f64>, BackendError> {
        if !(temperature > 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        let key = LogitKey::new(study, condition, question);
        let logits = self.logits.get(&key).ok_or_else(|| missing(&key))?;
        Ok(tempered_softmax(logits, temperature))
    }

    /// Confirm every asked question of every non-refused study has logits
    /// of the right length.
    pub fn check_coverage(&self, studies: &[StudySpec]) -> Result<(), BackendError> {
        for study in studies {
            if self.refuses(&study.id) {
                continue;
            }
            for cond in &study.conditions {
                for qid in &cond.question_order {
                    let key = LogitKey::new(&study.id, &cond.id, qid);
                    let logits = self.logits.get(&key).ok_or_else(|| missing(&key))?;
                    let scale_len = study.scale_of(qid).map_or(0, |s| s.len());
                    if logits.len() != scale_len {
                        return Err(BackendError::Config(format!(
                            "mock logits for {}/{}/{} have {} entries, scale has {}",
                            study.id,
                            cond.id,
                            qid,
                            logits.len(),
                            scale_len
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn draw(&self, question: &TaggedQuestion, probs: &[f64], seed: u64) -> char {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, question.slot as u64));
        let invalid: f64 = rng.random();
        let u: f64 = rng.random();
        if invalid < self.invalid_rate {
            return out_of_scale(&question.labels);
        }
        let mut cdf = 0.0;
        for (i, p) in probs.iter().enumerate() {
            cdf += p;
            if u < cdf {
                return question.labels[i];
            }
        }
        question.labels[probs.len() - 1]
    }
}

fn missing(key: &LogitKey) -> BackendError {
    BackendError::MissingLogits {
        study: key.study.clone(),
        condition: key.condition.clone(),
        question: key.question.clone(),
    }
}

fn out_of_scale(labels: &[char]) -> char {
    ('A'..='Z')
        .rev()
        .find(|c| !labels.iter().any(|l| l.eq_ignore_ascii_case(c)))
        .unwrap_or('?')
}

impl Backend for MockRespondentModel {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        let tag = request
            .tag
            .as_ref()
            .ok_or_else(|| BackendError::InvalidRequest("mock backend needs a request tag".into()))?;
        if self.refuses(&tag.study) {
            return Ok(REFUSAL_TEXT.to_string());
        }
        let seed = request.seed.unwrap_or(0);
        let mut out = String::new();
        for q in &tag.questions {
            let key = LogitKey::new(&tag.study, &tag.condition, &q.id);
            let logits = self.logits.get(&key).ok_or_else(|| missing(&key))?;
            if logits.len() != q.labels.len() {
                return Err(BackendError::Config(format!(
                    "mock logits for {}/{}/{} do not match the scale length",
                    key.study, key.condition, key.question
                )));
            }
            let probs = tempered_softmax(logits, request.temperature);
            let answer = self.draw(q, &probs, seed);
            if tag.batch {
                let _ = writeln!(out, "Answer {}: {}", q.slot, answer);
            } else {
                out.push(answer);
            }
        }
        Ok(out)
    }

    fn max_in_flight(&self) -> usize {
        rayon::current_num_threads().max(1)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}
