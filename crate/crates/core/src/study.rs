//! Study definitions: scales, questions, conditions, analysis plans and
//! human-replication ground truth, plus the loader for study files.
//!
//! One study lives in one TOML document. Unknown fields are rejected so
//! a typo in a fixture fails loudly instead of silently changing a plan.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Schema version accepted by [`load_studies`].
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {file}: {message}")]
    Parse { file: PathBuf, message: String },
    #[error("study `{study}` is invalid: {rule}")]
    Validation { study: String, rule: String },
}

/// Ordered single-letter answer tokens with their numeric codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scale {
    pub labels: Vec<char>,
    pub values: Vec<f64>,
}

impl Scale {
    pub fn new(labels: Vec<char>, values: Vec<f64>) -> Self {
        Self { labels, values }
    }

    /// Likert-style scale `A, B, ...` coded `1, 2, ...`.
    pub fn likert(points: usize) -> Self {
        let labels = (0..points).map(|i| (b'A' + i as u8) as char).collect();
        let values = (1..=points).map(|v| v as f64).collect();
        Self { labels, values }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: char) -> bool {
        self.labels.contains(&label)
    }

    /// Case-insensitive lookup returning the label as declared.
    pub fn find_label(&self, token: char) -> Option<char> {
        self.labels
            .iter()
            .copied()
            .find(|l| l.eq_ignore_ascii_case(&token) || *l == token)
    }

    pub fn index_of(&self, label: char) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn value_of(&self, label: char) -> Option<f64> {
        self.index_of(label).map(|i| self.values[i])
    }

    /// Every broken invariant, as human-readable rules.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.labels.is_empty() {
            out.push("scale has no labels".to_string());
        }
        if self.labels.len() != self.values.len() {
            out.push(format!(
                "scale labels/values length mismatch ({} vs {})",
                self.labels.len(),
                self.values.len()
            ));
        }
        let mut seen = BTreeSet::new();
        for &l in &self.labels {
            if !l.is_alphabetic() {
                out.push(format!("scale label {l:?} is not a letter"));
            }
            if !seen.insert(l.to_ascii_uppercase()) {
                out.push(format!("scale labels must be unique: duplicate label {l:?}"));
            }
        }
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                out.push(format!("scale value #{i} is not finite"));
            }
            if self.values[..i].contains(v) {
                out.push(format!("scale values must be distinct: duplicate value {v}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    /// Key into [`StudySpec::scales`].
    pub scale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub id: String,
    pub framing: String,
    pub question_order: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    TwoGroupMean,
    TwoByTwoCounts,
    CorrelationPair,
    TwoGroupProportion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    CohensD,
    OddsRatio,
    CohensQ,
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EffectKind::CohensD => "cohens_d",
            EffectKind::OddsRatio => "odds_ratio",
            EffectKind::CohensQ => "cohens_q",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    TTest,
    ChiSquared,
    FisherZ,
    TwoPropZ,
}

/// The four (effect, test) combinations the analysis plans may use.
pub const ALLOWED_PAIRS: [(EffectKind, TestKind); 4] = [
    (EffectKind::CohensD, TestKind::TTest),
    (EffectKind::OddsRatio, TestKind::ChiSquared),
    (EffectKind::CohensQ, TestKind::FisherZ),
    (EffectKind::CohensD, TestKind::TwoPropZ),
];

impl Measure {
    /// The (effect, test) pair this measure is analysed with.
    pub fn analysis(self) -> (EffectKind, TestKind) {
        match self {
            Measure::TwoGroupMean => (EffectKind::CohensD, TestKind::TTest),
            Measure::TwoByTwoCounts => (EffectKind::OddsRatio, TestKind::ChiSquared),
            Measure::CorrelationPair => (EffectKind::CohensQ, TestKind::FisherZ),
            Measure::TwoGroupProportion => (EffectKind::CohensD, TestKind::TwoPropZ),
        }
    }

    fn questions_per_condition(self) -> usize {
        match self {
            Measure::CorrelationPair => 2,
            _ => 1,
        }
    }

    fn needs_binarization(self) -> bool {
        matches!(self, Measure::TwoByTwoCounts | Measure::TwoGroupProportion)
    }
}

/// Sign of an effect relative to its null value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn of(x: f64) -> Option<Self> {
        if x > 0.0 {
            Some(Direction::Positive)
        } else if x < 0.0 {
            Some(Direction::Negative)
        } else {
            None
        }
    }
}

impl TryFrom<i8> for Direction {
    type Error = String;

    fn try_from(v: i8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Direction::Positive),
            -1 => Ok(Direction::Negative),
            other => Err(format!("direction must be +1 or -1, got {other}")),
        }
    }
}

impl From<Direction> for i8 {
    fn from(d: Direction) -> i8 {
        match d {
            Direction::Positive => 1,
            Direction::Negative => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableMap {
    /// Condition id to the question id(s) analysed in that condition.
    pub questions: BTreeMap<String, Vec<String>>,
    /// Labels counted as "success" when the measure binarizes answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_labels: Option<Vec<char>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisPlan {
    pub measure: Measure,
    pub effect: EffectKind,
    pub test: TestKind,
    /// Expected sign of (first condition minus second condition).
    pub expected_direction: Direction,
    pub variable_map: VariableMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanReplication {
    Replicated,
    NotReplicated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub original_direction: Direction,
    pub human_replication: HumanReplication,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub schema_version: u32,
    pub id: String,
    pub citation: String,
    pub scales: BTreeMap<String, Scale>,
    pub questions: Vec<Question>,
    pub conditions: Vec<Condition>,
    pub plan: AnalysisPlan,
    pub truth: GroundTruth,
}

/// A single broken plan or study invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanViolation {
    IllegalPair { effect: EffectKind, test: TestKind },
    MeasureMismatch { measure: Measure },
    WrongQuestionCount { condition: String, expected: usize, found: usize },
    MissingBinarization,
    EmptyBinarization,
    UnknownSuccessLabel { question: String, label: char },
    UnmappedCondition { condition: String },
    UnknownCondition { condition: String },
    UnknownQuestion { condition: String, question: String },
    QuestionNotAsked { condition: String, question: String },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::IllegalPair { effect, test } => {
                write!(f, "illegal (effect,test) pair ({effect}, {test:?})")
            }
            PlanViolation::MeasureMismatch { measure } => {
                write!(f, "measure {measure:?} is not analysed with the declared (effect,test) pair")
            }
            PlanViolation::WrongQuestionCount { condition, expected, found } => write!(
                f,
                "condition `{condition}` maps {found} question id(s); measure needs exactly {expected}"
            ),
            PlanViolation::MissingBinarization => {
                f.write_str("measure requires a binarization rule (success_labels)")
            }
            PlanViolation::EmptyBinarization => f.write_str("binarization rule has no success labels"),
            PlanViolation::UnknownSuccessLabel { question, label } => {
                write!(f, "success label {label:?} is not on the scale of question `{question}`")
            }
            PlanViolation::UnmappedCondition { condition } => {
                write!(f, "condition `{condition}` has no entry in the variable map")
            }
            PlanViolation::UnknownCondition { condition } => {
                write!(f, "variable map names unknown condition `{condition}`")
            }
            PlanViolation::UnknownQuestion { condition, question } => {
                write!(f, "variable map for `{condition}` names unknown question `{question}`")
            }
            PlanViolation::QuestionNotAsked { condition, question } => {
                write!(f, "question `{question}` is not asked in condition `{condition}`")
            }
        }
    }
}

/// Check an analysis plan against its study; returns every violation found.
pub fn validate_plan(study: &StudySpec) -> Result<(), Vec<PlanViolation>> {
    let plan = &study.plan;
    let mut out = Vec::new();

    let pair = (plan.effect, plan.test);
    if !ALLOWED_PAIRS.contains(&pair) {
        out.push(PlanViolation::IllegalPair { effect: plan.effect, test: plan.test });
    } else if plan.measure.analysis() != pair {
        out.push(PlanViolation::MeasureMismatch { measure: plan.measure });
    }

    let binarize = plan.variable_map.success_labels.as_deref();
    if plan.measure.needs_binarization() {
        match binarize {
            None => out.push(PlanViolation::MissingBinarization),
            Some([]) => out.push(PlanViolation::EmptyBinarization),
            Some(_) => {}
        }
    }

    let map = &plan.variable_map.questions;
    for cond in map.keys() {
        if !study.conditions.iter().any(|c| &c.id == cond) {
            out.push(PlanViolation::UnknownCondition { condition: cond.clone() });
        }
    }
    for cond in &study.conditions {
        let Some(qids) = map.get(&cond.id) else {
            out.push(PlanViolation::UnmappedCondition { condition: cond.id.clone() });
            continue;
        };
        let expected = plan.measure.questions_per_condition();
        if qids.len() != expected {
            out.push(PlanViolation::WrongQuestionCount {
                condition: cond.id.clone(),
                expected,
                found: qids.len(),
            });
        }
        for qid in qids {
            let Some(question) = study.question(qid) else {
                out.push(PlanViolation::UnknownQuestion {
                    condition: cond.id.clone(),
                    question: qid.clone(),
                });
                continue;
            };
            if !cond.question_order.contains(qid) {
                out.push(PlanViolation::QuestionNotAsked {
                    condition: cond.id.clone(),
                    question: qid.clone(),
                });
            }
            if let (Some(labels), Some(scale)) = (binarize, study.scales.get(&question.scale)) {
                if plan.measure.needs_binarization() {
                    for &label in labels {
                        if !scale.contains(label) {
                            out.push(PlanViolation::UnknownSuccessLabel {
                                question: qid.clone(),
                                label,
                            });
                        }
                    }
                }
            }
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

impl StudySpec {
    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn condition(&self, id: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.id == id)
    }

    /// Scale of a question, if both the question and its scale exist.
    pub fn scale_of(&self, question: &str) -> Option<&Scale> {
        self.question(question).and_then(|q| self.scales.get(&q.scale))
    }

    /// Question ids the plan analyses in `condition`.
    pub fn analysed_questions(&self, condition: &str) -> &[String] {
        self.plan
            .variable_map
            .questions
            .get(condition)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// All structural rules, including the analysis plan.
    pub fn validate(&self) -> Result<(), StudyError> {
        let fail = |rule: String| StudyError::Validation { study: self.id.clone(), rule };

        if self.schema_version != SCHEMA_VERSION {
            return Err(fail(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.id.trim().is_empty() {
            return Err(fail("study id is empty".into()));
        }
        for (name, scale) in &self.scales {
            if let Some(v) = scale.violations().into_iter().next() {
                return Err(fail(format!("scale `{name}`: {v}")));
            }
        }
        let mut ids = BTreeSet::new();
        for q in &self.questions {
            if !ids.insert(q.id.as_str()) {
                return Err(fail(format!("duplicate question id `{}`", q.id)));
            }
            if !self.scales.contains_key(&q.scale) {
                return Err(fail(format!(
                    "question `{}` references unknown scale `{}`",
                    q.id, q.scale
                )));
            }
        }
        if self.conditions.len() != 2 {
            return Err(fail(format!(
                "a study needs exactly 2 conditions, found {}",
                self.conditions.len()
            )));
        }
        if self.conditions[0].id == self.conditions[1].id {
            return Err(fail(format!("duplicate condition id `{}`", self.conditions[0].id)));
        }
        for c in &self.conditions {
            if c.question_order.is_empty() {
                return Err(fail(format!("condition `{}` asks no questions", c.id)));
            }
            let mut seen = BTreeSet::new();
            for qid in &c.question_order {
                if self.question(qid).is_none() {
                    return Err(fail(format!(
                        "condition `{}` orders unknown question `{qid}`",
                        c.id
                    )));
                }
                if !seen.insert(qid) {
                    return Err(fail(format!(
                        "condition `{}` asks question `{qid}` twice",
                        c.id
                    )));
                }
            }
        }
        validate_plan(self).map_err(|vs| {
            let joined = vs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            fail(joined)
        })
    }

    pub fn from_toml_str(text: &str, file: &Path) -> Result<Self, StudyError> {
        let study: StudySpec = toml::from_str(text).map_err(|e| StudyError::Parse {
            file: file.to_path_buf(),
            message: e.to_string(),
        })?;
        study.validate()?;
        Ok(study)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("study always serializes")
    }
}

/// Load every `*.toml` study file in `dir`, validated and sorted by id.
pub fn load_studies(dir: impl AsRef<Path>) -> Result<Vec<StudySpec>, StudyError> {
    let dir = dir.as_ref();
    let io = |source| StudyError::Io { path: dir.to_path_buf(), source };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();

    let mut studies = Vec::with_capacity(files.len());
    for file in files {
        let text = fs::read_to_string(&file).map_err(|source| StudyError::Io {
            path: file.clone(),
            source,
        })?;
        studies.push(StudySpec::from_toml_str(&text, &file)?);
    }
    studies.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = studies.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(StudyError::Validation {
            study: w[0].id.clone(),
            rule: "study id defined in more than one file".into(),
        });
    }
    Ok(studies)
}

/// Stable digest of a study set, used to detect mixed fixture versions.
pub fn fingerprint(studies: &[StudySpec]) -> String {
    let mut hasher = Sha256::new();
    for s in studies {
        hasher.update(s.to_toml_string().as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}
