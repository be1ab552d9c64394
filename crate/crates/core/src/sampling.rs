//! Turning a backend into synthetic samples.
//!
//! Each respondent answers every question of one condition, either in a
//! single batch prompt or one question at a time with earlier answers
//! appended. Answers that are not a single in-scale letter are counted as
//! invalid; a condition whose invalid share exceeds the configured limit
//! is discarded instead of analysed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, GenerationRequest, Message, RequestTag, TaggedQuestion};
use crate::seed::{mix, mix_str};
use crate::study::{Condition, Scale, StudySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Batch,
    Sequential,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(PromptMode::Batch),
            "sequential" => Ok(PromptMode::Sequential),
            other => Err(format!("unknown prompt mode `{other}` (batch|sequential)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub mode: PromptMode,
    pub max_invalid_fraction: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            temperature: 1.0,
            mode: PromptMode::Batch,
            max_invalid_fraction: 0.20,
            seed: 0,
            max_tokens: 64,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        let bad = |m: String| Err(SamplingError::Config(m));
        if self.n_samples < 2 {
            return bad(format!("n_samples must be at least 2, got {}", self.n_samples));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.max_invalid_fraction > 0.0 && self.max_invalid_fraction < 1.0) {
            return bad(format!(
                "max_invalid_fraction must lie in (0, 1), got {}",
                self.max_invalid_fraction
            ));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid sampling config: {0}")]
    Config(String),
    #[error("study `{study}` has no condition `{condition}`")]
    UnknownCondition { study: String, condition: String },
    #[error("fatal backend error: {0}")]
    Fatal(#[source] BackendError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// One synthetic respondent. Invalid answers are absent from `answers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondentRecord {
    pub study: String,
    pub condition: String,
    pub temperature: f64,
    pub index: usize,
    pub answers: BTreeMap<String, char>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub study: String,
    pub condition: String,
    pub temperature: f64,
    pub records: Vec<RespondentRecord>,
    pub requested_answers: usize,
    pub invalid_answers: usize,
}

impl SyntheticSample {
    pub fn invalid_fraction(&self) -> f64 {
        self.invalid_answers as f64 / self.requested_answers as f64
    }

    /// Labels given to `question`, in respondent order.
    pub fn labels(&self, question: &str) -> Vec<char> {
        self.records
            .iter()
            .filter_map(|r| r.answers.get(question).copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    InvalidRate,
    BackendFailure,
}

impl std::fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DiscardReason::InvalidRate => "invalid_rate",
            DiscardReason::BackendFailure => "backend_failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discarded {
    pub reason: DiscardReason,
    pub condition: String,
    pub detail: String,
}

/// Result of sampling one condition, plus every respondent drawn
/// (including invalid ones) for persistence.
#[derive(Debug, Clone)]
pub struct Collected {
    pub result: Result<SyntheticSample, Discarded>,
    pub records: Vec<RespondentRecord>,
}

/// Result of sampling both conditions of a study.
#[derive(Debug, Clone)]
pub struct Cell {
    pub result: Result<[SyntheticSample; 2], Discarded>,
    pub records: Vec<RespondentRecord>,
}

fn options_line(scale: &Scale) -> String {
    let letters: Vec<String> = scale.labels.iter().map(char::to_string).collect();
    format!("Options: {}", letters.join(", "))
}

/// Build the prompt for one request.
///
/// `answered` holds `(question id, answer text)` pairs already given in
/// sequential mode and must be a prefix of the condition's order; it is
/// ignored in batch mode.
pub fn build_prompt(
    study: &StudySpec,
    condition: &Condition,
    mode: PromptMode,
    answered: &[(&str, &str)],
) -> Vec<Message> {
    let mut text = String::new();
    text.push_str(condition.framing.trim());
    text.push_str("\n\n");
    match mode {
        PromptMode::Batch => {
            text.push_str(
                "Answer every question below with exactly one letter from its options. \
                 Fill in each blank using the format \"Answer N: <letter>\", one line per \
                 question, and write nothing else.\n",
            );
            for (i, qid) in condition.question_order.iter().enumerate() {
                let Some(q) = study.question(qid) else { continue };
                let slot = i + 1;
                let _ = write!(text, "\nQuestion {slot}: {}\n", q.prompt.trim());
                if let Some(scale) = study.scales.get(&q.scale) {
                    let _ = writeln!(text, "{}", options_line(scale));
                }
                let _ = writeln!(text, "Answer {slot}: ___");
            }
        }
        PromptMode::Sequential => {
            for (i, (qid, answer)) in answered.iter().enumerate() {
                let prompt = study.question(qid).map_or("", |q| q.prompt.trim());
                let slot = i + 1;
                let _ = write!(text, "Question {slot}: {prompt}\nAnswer {slot}: {answer}\n\n");
            }
            let slot = answered.len() + 1;
            if let Some(q) = condition
                .question_order
                .get(answered.len())
                .and_then(|qid| study.question(qid))
            {
                let _ = writeln!(text, "Question {slot}: {}", q.prompt.trim());
                if let Some(scale) = study.scales.get(&q.scale) {
                    let _ = writeln!(text, "{}", options_line(scale));
                }
                text.push_str("Reply with exactly one letter from the options and nothing else.\n");
            }
        }
    }
    vec![Message::user(text)]
}

/// Normalize a reply and accept it only if it is one in-scale letter.
pub fn parse_single_answer(raw: &str, scale: &Scale) -> Option<char> {
    let mut s = raw.trim();
    if let Some(last) = s.chars().last() {
        if last.is_ascii_punctuation() {
            s = s[..s.len() - last.len_utf8()].trim_end();
        }
    }
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => scale.find_label(c),
        _ => None,
    }
}

fn slot_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s*(\d+)\s*:").expect("valid regex"))
}

/// Match `Answer N:` slots in a batch reply to the condition's questions.
/// Missing or unparseable slots map to `None`.
pub fn parse_batch_transcript(
    raw: &str,
    study: &StudySpec,
    condition: &Condition,
) -> BTreeMap<String, Option<char>> {
    let re = slot_regex();
    let matches: Vec<_> = re.captures_iter(raw).collect();
    let mut slots: BTreeMap<usize, &str> = BTreeMap::new();
    for (i, cap) in matches.iter().enumerate() {
        let whole = cap.get(0).expect("group 0");
        let Ok(slot) = cap[1].parse::<usize>() else { continue };
        let end = matches
            .get(i + 1)
            .map_or(raw.len(), |next| next.get(0).expect("group 0").start());
        let rest = &raw[whole.end()..end];
        let value = rest.split('\n').next().unwrap_or("");
        slots.entry(slot).or_insert(value);
    }
    condition
        .question_order
        .iter()
        .enumerate()
        .map(|(i, qid)| {
            let parsed = match (slots.get(&(i + 1)), study.scale_of(qid)) {
                (Some(v), Some(scale)) => parse_single_answer(v, scale),
                _ => None,
            };
            (qid.clone(), parsed)
        })
        .collect()
}

fn tagged(study: &StudySpec, condition: &Condition, slot: usize) -> TaggedQuestion {
    let id = &condition.question_order[slot - 1];
    TaggedQuestion {
        slot,
        id: id.clone(),
        labels: study.scale_of(id).map(|s| s.labels.clone()).unwrap_or_default(),
    }
}

/// Per-respondent seed: a function of (run seed, study, condition, index).
pub fn respondent_seed(seed: u64, study: &str, condition: &str, index: usize) -> u64 {
    mix(mix_str(mix_str(seed, study), condition), index as u64)
}

fn respond<B: Backend + ?Sized>(
    backend: &B,
    study: &StudySpec,
    condition: &Condition,
    config: &SamplingConfig,
    index: usize,
) -> Result<(RespondentRecord, usize), BackendError> {
    let seed = respondent_seed(config.seed, &study.id, &condition.id, index);
    let request = |messages, batch, questions| GenerationRequest {
        messages,
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        seed: Some(seed),
        tag: Some(RequestTag {
            study: study.id.clone(),
            condition: condition.id.clone(),
            batch,
            questions,
        }),
    };

    let parsed: Vec<(String, Option<char>)> = match config.mode {
        PromptMode::Batch => {
            let questions = (1..=condition.question_order.len())
                .map(|slot| tagged(study, condition, slot))
                .collect();
            let messages = build_prompt(study, condition, PromptMode::Batch, &[]);
            let reply = backend.generate(&request(messages, true, questions))?;
            let map = parse_batch_transcript(&reply, study, condition);
            condition
                .question_order
                .iter()
                .map(|q| (q.clone(), map.get(q).copied().flatten()))
                .collect()
        }
        PromptMode::Sequential => {
            let mut history: Vec<(String, String)> = Vec::new();
            let mut out = Vec::new();
            for (i, qid) in condition.question_order.iter().enumerate() {
                let answered: Vec<(&str, &str)> =
                    history.iter().map(|(q, a)| (q.as_str(), a.as_str())).collect();
                let messages = build_prompt(study, condition, PromptMode::Sequential, &answered);
                let reply =
                    backend.generate(&request(messages, false, vec![tagged(study, condition, i + 1)]))?;
                let label = study.scale_of(qid).and_then(|s| parse_single_answer(&reply, s));
                let shown = label.map_or_else(
                    || reply.lines().next().unwrap_or("").trim().to_string(),
                    |l| l.to_string(),
                );
                history.push((qid.clone(), shown));
                out.push((qid.clone(), label));
            }
            out
        }
    };

    let invalid = parsed.iter().filter(|(_, l)| l.is_none()).count();
    let answers = parsed
        .into_iter()
        .filter_map(|(q, l)| l.map(|l| (q, l)))
        .collect();
    Ok((
        RespondentRecord {
            study: study.id.clone(),
            condition: condition.id.clone(),
            temperature: config.temperature,
            index,
            answers,
            valid: invalid == 0,
        },
        invalid,
    ))
}

/// Draw `n_samples` respondents for one condition and apply the discard
/// rule. Only authentication/configuration failures are returned as
/// errors; other backend failures discard the condition.
pub fn collect_sample<B: Backend + ?Sized>(
    backend: &B,
    study: &StudySpec,
    condition_id: &str,
    config: &SamplingConfig,
) -> Result<Collected, SamplingError> {
    config.validate()?;
    let condition = study.condition(condition_id).ok_or_else(|| SamplingError::UnknownCondition {
        study: study.id.clone(),
        condition: condition_id.to_string(),
    })?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(backend.max_in_flight().max(1))
        .build()
        .map_err(|e| SamplingError::Pool(e.to_string()))?;
    let drawn: Result<Vec<_>, BackendError> = pool.install(|| {
        (0..config.n_samples)
            .into_par_iter()
            .map(|i| respond(backend, study, condition, config, i))
            .collect()
    });

    let drawn = match drawn {
        Ok(d) => d,
        Err(e) if e.is_fatal() => return Err(SamplingError::Fatal(e)),
        Err(e) => {
            return Ok(Collected {
                result: Err(Discarded {
                    reason: DiscardReason::BackendFailure,
                    condition: condition.id.clone(),
                    detail: e.to_string(),
                }),
                records: Vec::new(),
            })
        }
    };

    let requested = config.n_samples * condition.question_order.len();
    let invalid: usize = drawn.iter().map(|(_, bad)| bad).sum();
    let records: Vec<RespondentRecord> = drawn.into_iter().map(|(r, _)| r).collect();
    let fraction = invalid as f64 / requested as f64;
    let result = if fraction > config.max_invalid_fraction {
        Err(Discarded {
            reason: DiscardReason::InvalidRate,
            condition: condition.id.clone(),
            detail: format!(
                "{invalid} of {requested} answers invalid ({:.1}% > {:.1}%)",
                100.0 * fraction,
                100.0 * config.max_invalid_fraction
            ),
        })
    } else {
        Ok(SyntheticSample {
            study: study.id.clone(),
            condition: condition.id.clone(),
            temperature: config.temperature,
            records: records.iter().filter(|r| r.valid).cloned().collect(),
            requested_answers: requested,
            invalid_answers: invalid,
        })
    };
    Ok(Collected { result, records })
}

/// Sample both conditions; a discard in either discards the study.
pub fn run_cell<B: Backend + ?Sized>(
    backend: &B,
    study: &StudySpec,
    config: &SamplingConfig,
) -> Result<Cell, SamplingError> {
    if study.conditions.len() != 2 {
        return Err(SamplingError::Config(format!(
            "study `{}` must have exactly 2 conditions",
            study.id
        )));
    }
    let first = collect_sample(backend, study, &study.conditions[0].id, config)?;
    let mut records = first.records;
    let a = match first.result {
        Ok(a) => a,
        Err(d) => return Ok(Cell { result: Err(d), records }),
    };
    let second = collect_sample(backend, study, &study.conditions[1].id, config)?;
    records.extend(second.records);
    let result = second.result.map(|b| [a, b]);
    Ok(Cell { result, records })
}
