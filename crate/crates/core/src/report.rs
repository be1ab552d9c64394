//! Run orchestration and the files a run leaves behind.
//!
//! A run directory holds:
//!
//! * `run.json`: manifest with the config snapshot, fixture fingerprint,
//!   per-study layout, metrics and one [`RunRecord`] per study
//! * `respondents.jsonl`: every raw respondent, valid or not
//! * `effects.csv`: `temperature,study,effect,p_value`
//! * `metrics.csv`: `model,temperature,f1,precision,recall,studies_evaluated`
//!
//! A sweep directory holds one run directory per temperature plus
//! `sweep_matrix.csv` and a combined `metrics.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, HttpBackend, HttpConfig, MockRespondentModel};
use crate::sampling::{run_cell, Discarded, RespondentRecord, SamplingConfig, SamplingError};
use crate::seed::temperature_seed;
use crate::stats::{estimate_effect, EffectEstimate, EstimateError, EstimateState};
use crate::study::{fingerprint, GroundTruth, StudyError, StudySpec};
use crate::verdict::{aggregate, decide, AggregateMetrics, MissingTruth, Outcome, Verdict};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const RUN_FILE: &str = "run.json";
pub const RESPONDENTS_FILE: &str = "respondents.jsonl";
pub const EFFECTS_FILE: &str = "effects.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_MATRIX_FILE: &str = "sweep_matrix.csv";
pub const HISTOGRAM_DIR: &str = "histograms";
pub const SKIPPED_FILE: &str = "skipped.csv";

/// Marks a cell whose estimate is undefined (zero variance).
pub const UNDEFINED_MARKER: &str = "*";
/// Marks a cell whose study was discarded.
pub const DISCARDED_MARKER: &str = "†";

/// Mock model used when no other is supplied; it covers the bundled studies.
pub const BUNDLED_MOCK_MODEL: &str = include_str!("../fixtures/mock_model.toml");

pub fn bundled_mock_model() -> MockRespondentModel {
    MockRespondentModel::from_toml_str(BUNDLED_MOCK_MODEL).expect("bundled mock model parses")
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error("backend failure: {0}")]
    Backend(BackendError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("study `{study}`: {source}")]
    Estimate {
        study: String,
        #[source]
        source: EstimateError,
    },
    #[error(transparent)]
    MissingTruth(#[from] MissingTruth),
    #[error("{path}: malformed record: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("runs are not comparable: {0}")]
    Inconsistent(String),
}

impl ReportError {
    /// Whether the CLI should report this as a backend failure.
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, ReportError::Backend(_))
    }
}

impl From<SamplingError> for ReportError {
    fn from(e: SamplingError) -> Self {
        match e {
            SamplingError::Fatal(b) => ReportError::Backend(b),
            other => ReportError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock { model: MockRespondentModel },
    Http(HttpConfig),
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn Backend>, BackendError> {
        Ok(match self {
            BackendConfig::Mock { model } => Box::new(model.clone()),
            BackendConfig::Http(cfg) => Box::new(HttpBackend::new(cfg.clone())?),
        })
    }
}

/// Everything needed to repeat a run. With a mock backend the snapshot
/// reproduces every emitted file exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: String,
    pub studies_dir: String,
    pub alpha: f64,
    pub sampling: SamplingConfig,
    pub backend: BackendConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ReportError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ReportError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.sampling.validate()?;
        Ok(())
    }

    /// Same config at another temperature, with the derived seed.
    pub fn at_temperature(&self, temperature: f64) -> RunConfig {
        let mut c = self.clone();
        c.sampling.temperature = temperature;
        c.sampling.seed = temperature_seed(self.sampling.seed, temperature);
        c
    }
}

/// One study's result in one (model, temperature) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub temperature: f64,
    pub study: String,
    pub seed: u64,
    pub estimate: Option<EffectEstimate>,
    pub discard: Option<Discarded>,
    pub outcome: Outcome,
    pub reason: String,
    pub truth: GroundTruth,
    /// Retained respondents per condition, in study order.
    pub retained: Vec<usize>,
    /// Wall-clock bounds in Unix milliseconds; omitted for deterministic backends.
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
}

impl RunRecord {
    pub fn verdict(&self) -> Verdict {
        Verdict {
            study: self.study.clone(),
            outcome: self.outcome,
            estimate: self.estimate.clone(),
            reason: self.reason.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionLayout {
    pub id: String,
    pub questions: Vec<String>,
}

/// What the histogram pass needs to know about a study without the
/// fixture directory at hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyLayout {
    pub id: String,
    pub conditions: Vec<ConditionLayout>,
    pub labels: BTreeMap<String, Vec<char>>,
}

impl StudyLayout {
    pub fn of(study: &StudySpec) -> Self {
        StudyLayout {
            id: study.id.clone(),
            conditions: study
                .conditions
                .iter()
                .map(|c| ConditionLayout { id: c.id.clone(), questions: c.question_order.clone() })
                .collect(),
            labels: study
                .questions
                .iter()
                .filter_map(|q| study.scale_of(&q.id).map(|s| (q.id.clone(), s.labels.clone())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub fixtures_fingerprint: String,
    pub config: RunConfig,
    pub studies: Vec<StudyLayout>,
    pub metrics: AggregateMetrics,
    pub records: Vec<RunRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self, ReportError> {
        let path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| ReportError::Malformed { path: path.clone(), message: e.to_string() })?;
        if manifest.schema_version != REPORT_SCHEMA_VERSION {
            return Err(ReportError::Malformed {
                path,
                message: format!("unsupported schema_version {}", manifest.schema_version),
            });
        }
        Ok(manifest)
    }

    pub fn truths(&self) -> BTreeMap<String, GroundTruth> {
        self.records.iter().map(|r| (r.study.clone(), r.truth.clone())).collect()
    }

    /// Metrics recomputed from the stored records.
    pub fn recompute_metrics(&self) -> Result<AggregateMetrics, ReportError> {
        let verdicts: Vec<Verdict> = self.records.iter().map(RunRecord::verdict).collect();
        Ok(aggregate(&verdicts, &self.truths())?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub respondents: Vec<RespondentRecord>,
}

impl RunOutput {
    /// True when every study was lost to backend errors, i.e. nothing
    /// was actually measured.
    pub fn all_backend_failures(&self) -> bool {
        use crate::sampling::DiscardReason;
        !self.manifest.records.is_empty()
            && self.manifest.records.iter().all(|r| {
                r.discard.as_ref().is_some_and(|d| d.reason == DiscardReason::BackendFailure)
            })
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn run_study(
    backend: &dyn Backend,
    study: &StudySpec,
    config: &RunConfig,
) -> Result<(RunRecord, Vec<RespondentRecord>), ReportError> {
    let timed = !backend.is_deterministic();
    let started_ms = timed.then(now_ms);
    let cell = run_cell(backend, study, &config.sampling)?;
    let (estimate, discard, retained) = match &cell.result {
        Ok(samples) => {
            let est = estimate_effect(samples, study)
                .map_err(|source| ReportError::Estimate { study: study.id.clone(), source })?;
            (Some(est), None, samples.iter().map(|s| s.records.len()).collect())
        }
        Err(d) => (None, Some(d.clone()), Vec::new()),
    };
    let evidence = match (&estimate, &discard) {
        (Some(e), _) => Ok(e),
        (None, Some(d)) => Err(d),
        (None, None) => unreachable!("a cell yields an estimate or a discard"),
    };
    let verdict = decide(&study.id, evidence, &study.plan, config.alpha);
    log::info!("{} @ T={}: {:?}", study.id, config.sampling.temperature, verdict.outcome);
    let record = RunRecord {
        model: config.model.clone(),
        temperature: config.sampling.temperature,
        study: study.id.clone(),
        seed: config.sampling.seed,
        estimate,
        discard,
        outcome: verdict.outcome,
        reason: verdict.reason,
        truth: study.truth.clone(),
        retained,
        started_ms,
        finished_ms: timed.then(now_ms),
    };
    Ok((record, cell.records))
}

/// Run every study once. Studies execute concurrently; results keep the
/// order of `studies`.
pub fn execute(
    studies: &[StudySpec],
    backend: &dyn Backend,
    config: &RunConfig,
) -> Result<RunOutput, ReportError> {
    config.validate()?;
    let results: Vec<_> =
        studies.par_iter().map(|s| run_study(backend, s, config)).collect::<Result<_, _>>()?;
    let mut records = Vec::with_capacity(results.len());
    let mut respondents = Vec::new();
    for (rec, raw) in results {
        records.push(rec);
        respondents.extend(raw);
    }
    let verdicts: Vec<Verdict> = records.iter().map(RunRecord::verdict).collect();
    let truths = studies.iter().map(|s| (s.id.clone(), s.truth.clone())).collect();
    let metrics = aggregate(&verdicts, &truths)?;
    Ok(RunOutput {
        manifest: RunManifest {
            schema_version: REPORT_SCHEMA_VERSION,
            fixtures_fingerprint: fingerprint(studies),
            config: config.clone(),
            studies: studies.iter().map(StudyLayout::of).collect(),
            metrics,
            records,
        },
        respondents,
    })
}

/// Run and persist into `out`.
pub fn run(
    studies: &[StudySpec],
    backend: &dyn Backend,
    config: &RunConfig,
    out: &Path,
) -> Result<RunOutput, ReportError> {
    let output = execute(studies, backend, config)?;
    write_run(out, &output)?;
    Ok(output)
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn write_run(dir: &Path, output: &RunOutput) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let m = &output.manifest;

    let path = dir.join(RUN_FILE);
    let mut json = serde_json::to_string_pretty(m).expect("manifest serializes");
    json.push('\n');
    write_file(&path, &json)?;

    let path = dir.join(RESPONDENTS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    for r in &output.respondents {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    write_file(&dir.join(EFFECTS_FILE), &effects_csv(&m.records))?;
    write_file(
        &dir.join(METRICS_FILE),
        &metrics_csv(&[(m.config.model.as_str(), m.config.sampling.temperature, &m.metrics)]),
    )?;
    Ok(())
}

/// Temperature as written in tables and directory names ("0.5", "1.0").
pub fn format_temperature(t: f64) -> String {
    format!("{t:?}")
}

/// C-style `%.2E`: two-digit signed exponent, e.g. `7.74E-06`, `0.00E+00`.
pub fn format_p(p: f64) -> String {
    let s = format!("{p:.2E}");
    let (mantissa, exp) = s.split_once('E').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}E{sign}{:02}", exp.abs())
}

fn effect_cell(r: &RunRecord, decimals: usize) -> (String, String) {
    match (&r.discard, &r.estimate) {
        (Some(_), _) | (None, None) => (DISCARDED_MARKER.into(), DISCARDED_MARKER.into()),
        (None, Some(e)) => match (e.state, e.value, e.p_value) {
            (EstimateState::Ok, Some(v), Some(p)) => (format!("{v:.decimals$}"), format_p(p)),
            _ => (UNDEFINED_MARKER.into(), UNDEFINED_MARKER.into()),
        },
    }
}

pub fn effects_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("temperature,study,effect,p_value\n");
    for r in records {
        let (effect, p) = effect_cell(r, 2);
        let _ = writeln!(out, "{},{},{effect},{p}", format_temperature(r.temperature), r.study);
    }
    out
}

fn opt4(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

pub fn metrics_csv(rows: &[(&str, f64, &AggregateMetrics)]) -> String {
    let mut out = String::from("model,temperature,f1,precision,recall,studies_evaluated\n");
    for (model, t, m) in rows {
        let _ = writeln!(
            out,
            "{model},{},{},{},{},{}",
            format_temperature(*t),
            opt4(m.f1),
            opt4(m.precision),
            opt4(m.recall),
            m.studies_evaluated
        );
    }
    out
}

/// Rows are temperatures, columns are studies; cells hold the effect
/// size or one of the two markers.
pub fn sweep_matrix_csv(runs: &[RunManifest]) -> String {
    let mut studies: Vec<&str> = Vec::new();
    for m in runs {
        for r in &m.records {
            if !studies.contains(&r.study.as_str()) {
                studies.push(&r.study);
            }
        }
    }
    let mut out = String::from("temperature");
    for s in &studies {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    for m in runs {
        out.push_str(&format_temperature(m.config.sampling.temperature));
        for s in &studies {
            out.push(',');
            match m.records.iter().find(|r| r.study == *s) {
                Some(r) => out.push_str(&effect_cell(r, 4).0),
                None => out.push_str(DISCARDED_MARKER),
            }
        }
        out.push('\n');
    }
    out
}

/// Subdirectory name for one temperature of a sweep.
pub fn temperature_dir(t: f64) -> String {
    format!("t_{}", format_temperature(t))
}

/// Run once per temperature, each with its own derived seed.
pub fn sweep(
    studies: &[StudySpec],
    backend: &dyn Backend,
    config: &RunConfig,
    temperatures: &[f64],
    out: &Path,
) -> Result<Vec<RunManifest>, ReportError> {
    if temperatures.is_empty() {
        return Err(ReportError::Config("a sweep needs at least one temperature".into()));
    }
    for (i, t) in temperatures.iter().enumerate() {
        if temperatures[..i].iter().any(|u| format_temperature(*u) == format_temperature(*t)) {
            return Err(ReportError::Config(format!("temperature {t} listed twice")));
        }
    }
    let mut manifests = Vec::with_capacity(temperatures.len());
    for &t in temperatures {
        let cfg = config.at_temperature(t);
        let output = run(studies, backend, &cfg, &out.join(temperature_dir(t)))?;
        manifests.push(output.manifest);
    }
    write_file(&out.join(SWEEP_MATRIX_FILE), &sweep_matrix_csv(&manifests))?;
    let rows: Vec<_> = manifests
        .iter()
        .map(|m| (m.config.model.as_str(), m.config.sampling.temperature, &m.metrics))
        .collect();
    write_file(&out.join(METRICS_FILE), &metrics_csv(&rows))?;
    Ok(manifests)
}

/// Summary of a histogram pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSummary {
    /// Files written with the number of respondents each one counts.
    pub written: Vec<(PathBuf, usize)>,
    /// (study, condition, question, reason) for cells with no histogram.
    pub skipped: Vec<(String, String, String, String)>,
}

pub fn histogram_file_name(study: &str, condition: &str, question: &str) -> String {
    format!("{study}__{condition}__{question}.csv")
}

/// Write one `label,count` file per (study, condition, question) from
/// the retained respondents of a run. Discarded studies are listed in
/// `skipped.csv` instead.
pub fn histograms(run_dir: &Path) -> Result<HistogramSummary, ReportError> {
    let manifest = RunManifest::load(run_dir)?;
    let raw_path = run_dir.join(RESPONDENTS_FILE);
    let file = fs::File::open(&raw_path).map_err(io_err(&raw_path))?;

    // (study, condition, question) -> label -> count
    let mut counts: BTreeMap<(String, String, String), BTreeMap<char, usize>> = BTreeMap::new();
    let mut retained: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&raw_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RespondentRecord = serde_json::from_str(&line).map_err(|e| ReportError::Malformed {
            path: raw_path.clone(),
            message: format!("line {}: {e}", n + 1),
        })?;
        if !r.valid {
            continue;
        }
        *retained.entry((r.study.clone(), r.condition.clone())).or_default() += 1;
        for (q, label) in r.answers {
            *counts
                .entry((r.study.clone(), r.condition.clone(), q))
                .or_default()
                .entry(label)
                .or_default() += 1;
        }
    }

    let dir = run_dir.join(HISTOGRAM_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut summary = HistogramSummary { written: Vec::new(), skipped: Vec::new() };
    for layout in &manifest.studies {
        let record = manifest.records.iter().find(|r| r.study == layout.id);
        let discard = record.and_then(|r| r.discard.as_ref());
        for cond in &layout.conditions {
            for q in &cond.questions {
                if let Some(d) = discard {
                    summary.skipped.push((
                        layout.id.clone(),
                        cond.id.clone(),
                        q.clone(),
                        d.reason.to_string(),
                    ));
                    continue;
                }
                let empty = BTreeMap::new();
                let cell = counts
                    .get(&(layout.id.clone(), cond.id.clone(), q.clone()))
                    .unwrap_or(&empty);
                let labels = layout.labels.get(q).cloned().unwrap_or_default();
                let mut csv = String::from("label,count\n");
                let mut total = 0;
                for l in &labels {
                    let c = cell.get(l).copied().unwrap_or(0);
                    total += c;
                    let _ = writeln!(csv, "{l},{c}");
                }
                let expected =
                    retained.get(&(layout.id.clone(), cond.id.clone())).copied().unwrap_or(0);
                if total != expected {
                    return Err(ReportError::Malformed {
                        path: raw_path.clone(),
                        message: format!(
                            "{}/{}/{q}: {total} labelled answers for {expected} retained respondents",
                            layout.id, cond.id
                        ),
                    });
                }
                let path = dir.join(histogram_file_name(&layout.id, &cond.id, q));
                write_file(&path, &csv)?;
                summary.written.push((path, total));
            }
        }
    }
    let mut skipped = String::from("study,condition,question,reason\n");
    for (s, c, q, r) in &summary.skipped {
        let _ = writeln!(skipped, "{s},{c},{q},{r}");
    }
    write_file(&dir.join(SKIPPED_FILE), &skipped)?;
    Ok(summary)
}

/// Run directories under `path`: the directory itself if it holds a
/// manifest, else its immediate subdirectories that do (a sweep).
pub fn discover_runs(path: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if path.join(RUN_FILE).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(path).map_err(io_err(path))? {
        let p = entry.map_err(io_err(path))?.path();
        if p.join(RUN_FILE).is_file() {
            found.push(p);
        }
    }
    if found.is_empty() {
        return Err(ReportError::Io {
            path: path.join(RUN_FILE),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no run manifest found"),
        });
    }
    found.sort();
    Ok(found)
}

/// Consolidated metrics table recomputed from stored records, one row per
/// run. All runs must share the same fixtures.
pub fn metrics(paths: &[PathBuf]) -> Result<String, ReportError> {
    if paths.is_empty() {
        return Err(ReportError::Config("no run directories given".into()));
    }
    let mut manifests = Vec::new();
    for p in paths {
        for dir in discover_runs(p)? {
            manifests.push((dir.clone(), RunManifest::load(&dir)?));
        }
    }
    let (first_dir, first) = &manifests[0];
    for (dir, m) in &manifests[1..] {
        if m.fixtures_fingerprint != first.fixtures_fingerprint {
            return Err(ReportError::Inconsistent(format!(
                "{} and {} were produced from different study fixtures",
                first_dir.display(),
                dir.display()
            )));
        }
    }
    let mut rows = Vec::with_capacity(manifests.len());
    for (_, m) in &manifests {
        rows.push((m.config.model.clone(), m.config.sampling.temperature, m.recompute_metrics()?));
    }
    let refs: Vec<_> = rows.iter().map(|(model, t, m)| (model.as_str(), *t, m)).collect();
    Ok(metrics_csv(&refs))
}
