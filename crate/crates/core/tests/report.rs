use std::fs;
use std::path::{Path, PathBuf};

use replisim::backends::{Backend, BackendError, GenerationRequest, LogitKey, MockRespondentModel};
use replisim::report::{self, BackendConfig, ReportError, RunConfig, RunManifest};
use replisim::sampling::{DiscardReason, PromptMode, SamplingConfig};
use replisim::{load_studies, Outcome, StudySpec};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/studies")
}

fn studies() -> Vec<StudySpec> {
    load_studies(fixtures()).unwrap()
}

fn config(model: &MockRespondentModel, n: usize, t: f64, seed: u64) -> RunConfig {
    RunConfig {
        model: "mock".into(),
        studies_dir: "fixtures/studies".into(),
        alpha: 0.05,
        sampling: SamplingConfig {
            n_samples: n,
            temperature: t,
            mode: PromptMode::Batch,
            seed,
            ..SamplingConfig::default()
        },
        backend: BackendConfig::Mock { model: model.clone() },
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (studies, model) = (studies(), report::bundled_mock_model());
    let cfg = config(&model, 1000, 1.0, 7);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = report::run(&studies, &model, &cfg, &a).unwrap();
    report::run(&studies, &model, &cfg, &b).unwrap();
    assert_eq!(out.manifest.records.len(), 14);
    for f in [report::RUN_FILE, report::RESPONDENTS_FILE, report::EFFECTS_FILE, report::METRICS_FILE] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs");
    }
    assert!(out.manifest.records.iter().all(|r| r.started_ms.is_none()));
}

#[test]
fn config_snapshot_reproduces_the_run() {
    let (studies, model) = (studies(), report::bundled_mock_model());
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    report::run(&studies, &model, &config(&model, 200, 0.5, 11), &first).unwrap();

    let snapshot = RunManifest::load(&first).unwrap().config;
    let backend = snapshot.backend.build().unwrap();
    let second = tmp.path().join("second");
    report::run(&studies, backend.as_ref(), &snapshot, &second).unwrap();
    assert_eq!(read(&first, report::RUN_FILE), read(&second, report::RUN_FILE));
    assert_eq!(read(&first, report::RESPONDENTS_FILE), read(&second, report::RESPONDENTS_FILE));
}

#[test]
fn refusal_study_is_discarded_for_invalid_answers() {
    let (studies, model) = (studies(), report::bundled_mock_model());
    let out = report::execute(&studies, &model, &config(&model, 100, 1.0, 1)).unwrap();
    let inbar = out.manifest.records.iter().find(|r| r.study == "Inbar_2009").unwrap();
    assert_eq!(inbar.discard.as_ref().unwrap().reason, DiscardReason::InvalidRate);
    assert_eq!(inbar.outcome, Outcome::Unusable);
    let effects = report::effects_csv(&out.manifest.records);
    assert!(effects.contains("1.0,Inbar_2009,†,†\n"), "{effects}");
    assert_eq!(out.manifest.metrics.unusable, 1);
    assert_eq!(out.manifest.metrics.studies_evaluated, 13);
}

#[test]
fn effects_table_has_expected_shape() {
    let (studies, model) = (studies(), report::bundled_mock_model());
    let out = report::execute(&studies, &model, &config(&model, 300, 0.5, 2)).unwrap();
    let csv = report::effects_csv(&out.manifest.records);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("temperature,study,effect,p_value"));
    let row_re = regex::Regex::new(r"^0\.5,[A-Za-z_0-9]+,(-?\d+\.\d{2},\d\.\d{2}E[+-]\d{2,3}|\*,\*|†,†)$").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 14);
    for row in rows {
        assert!(row_re.is_match(row), "{row}");
    }
}

#[test]
fn stored_metrics_match_recomputation() {
    let (studies, model) = (studies(), report::bundled_mock_model());
    let tmp = tempfile::tempdir().unwrap();
    let out = report::run(&studies, &model, &config(&model, 300, 1.0, 5), tmp.path()).unwrap();
    let loaded = RunManifest::load(tmp.path()).unwrap();
    assert_eq!(loaded.recompute_metrics().unwrap(), out.manifest.metrics);
    let table = report::metrics(&[tmp.path().to_path_buf()]).unwrap();
    assert_eq!(table, String::from_utf8(read(tmp.path(), report::METRICS_FILE)).unwrap());
}

#[test]
fn all_unusable_run_leaves_metrics_blank() {
    let studies = studies();
    let model = MockRespondentModel::new();
    let tmp = tempfile::tempdir().unwrap();
    let out = report::run(&studies, &model, &config(&model, 20, 1.0, 1), tmp.path()).unwrap();
    assert!(out.all_backend_failures());
    let csv = String::from_utf8(read(tmp.path(), report::METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().nth(1), Some("mock,1.0,,,,0"));
}

/// Mock that garbles one study at one temperature.
struct Flaky {
    inner: MockRespondentModel,
    study: &'static str,
    temperature: f64,
}

impl Backend for Flaky {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let hit = request.tag.as_ref().is_some_and(|t| t.study == self.study);
        if hit && request.temperature == self.temperature {
            return Ok("no idea".into());
        }
        self.inner.generate(request)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[test]
fn sweep_marks_a_single_discarded_cell() {
    let studies = studies();
    let model = report::bundled_mock_model();
    let flaky = Flaky { inner: model.clone(), study: "Knobe_2003", temperature: 1.5 };
    let tmp = tempfile::tempdir().unwrap();
    let grid = [0.1, 0.5, 1.0, 1.5];
    let runs = report::sweep(&studies, &flaky, &config(&model, 200, 1.0, 3), &grid, tmp.path()).unwrap();
    assert_eq!(runs.len(), 4);

    let matrix = fs::read_to_string(tmp.path().join(report::SWEEP_MATRIX_FILE)).unwrap();
    let rows: Vec<Vec<&str>> = matrix.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    let knobe = rows[0].iter().position(|c| *c == "Knobe_2003").unwrap();
    let inbar = rows[0].iter().position(|c| *c == "Inbar_2009").unwrap();
    for row in &rows[1..] {
        assert_eq!(row.len(), 15);
        let discarded = row[knobe] == report::DISCARDED_MARKER;
        assert_eq!(discarded, row[0] == "1.5", "{row:?}");
        assert_eq!(row[inbar], report::DISCARDED_MARKER);
    }
    let metrics = fs::read_to_string(tmp.path().join(report::METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    for t in grid {
        assert!(tmp.path().join(report::temperature_dir(t)).join(report::RUN_FILE).is_file());
    }
}

#[test]
fn sweep_temperatures_get_distinct_seeds() {
    let (studies, model) = (studies(), report::bundled_mock_model());
    let tmp = tempfile::tempdir().unwrap();
    let runs = report::sweep(&studies, &model, &config(&model, 50, 1.0, 9), &[0.5, 1.0], tmp.path()).unwrap();
    assert_ne!(runs[0].config.sampling.seed, runs[1].config.sampling.seed);
    assert!(matches!(
        report::sweep(&studies, &model, &config(&model, 50, 1.0, 9), &[], tmp.path()),
        Err(ReportError::Config(_))
    ));
    assert!(matches!(
        report::sweep(&studies, &model, &config(&model, 50, 1.0, 9), &[0.5, 0.5], tmp.path()),
        Err(ReportError::Config(_))
    ));
}

#[test]
fn single_temperature_sweep_has_one_matrix_row() {
    let (studies, model) = (studies(), report::bundled_mock_model());
    let tmp = tempfile::tempdir().unwrap();
    report::sweep(&studies, &model, &config(&model, 50, 1.0, 9), &[1.0], tmp.path()).unwrap();
    let matrix = fs::read_to_string(tmp.path().join(report::SWEEP_MATRIX_FILE)).unwrap();
    assert_eq!(matrix.lines().count(), 2);
}

fn two_logit_study() -> (StudySpec, MockRespondentModel) {
    let text = fs::read_to_string(fixtures().join("Hauser_2007.toml")).unwrap();
    let study = StudySpec::from_toml_str(&text, Path::new("Hauser_2007.toml")).unwrap();
    let model = MockRespondentModel::new()
        .with_logits(LogitKey::new("Hauser_2007", "side_track", "permissible"), vec![2.0, 0.0])
        .with_logits(LogitKey::new("Hauser_2007", "footbridge", "permissible"), vec![0.0, 2.0]);
    (study, model)
}

#[test]
fn low_temperature_histogram_concentrates_on_the_top_label() {
    let (study, model) = two_logit_study();
    let tmp = tempfile::tempdir().unwrap();
    report::run(std::slice::from_ref(&study), &model, &config(&model, 1000, 0.1, 4), tmp.path()).unwrap();
    let summary = report::histograms(tmp.path()).unwrap();
    assert_eq!(summary.written.len(), 2);
    assert!(summary.skipped.is_empty());
    let name = report::histogram_file_name("Hauser_2007", "side_track", "permissible");
    let csv = fs::read_to_string(tmp.path().join(report::HISTOGRAM_DIR).join(name)).unwrap();
    let counts: Vec<(String, usize)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (label, n) = l.split_once(',').unwrap();
            (label.to_string(), n.parse().unwrap())
        })
        .collect();
    let total: usize = counts.iter().map(|c| c.1).sum();
    assert_eq!(total, 1000);
    assert!(counts[0].0 == "A" && counts[0].1 as f64 >= 0.99 * total as f64, "{counts:?}");
}

#[test]
fn discarded_cells_go_to_the_skip_manifest() {
    let (study, model) = two_logit_study();
    let model = model.with_refusal("Hauser_2007");
    let tmp = tempfile::tempdir().unwrap();
    report::run(std::slice::from_ref(&study), &model, &config(&model, 100, 1.0, 4), tmp.path()).unwrap();
    let summary = report::histograms(tmp.path()).unwrap();
    assert!(summary.written.is_empty());
    assert_eq!(summary.skipped.len(), 2);
    let skipped = fs::read_to_string(tmp.path().join(report::HISTOGRAM_DIR).join(report::SKIPPED_FILE)).unwrap();
    assert!(skipped.contains("Hauser_2007,side_track,permissible,invalid_rate"));
    let files = fs::read_dir(tmp.path().join(report::HISTOGRAM_DIR)).unwrap().count();
    assert_eq!(files, 1);
}

#[test]
fn histograms_need_raw_respondents() {
    let (study, model) = two_logit_study();
    let tmp = tempfile::tempdir().unwrap();
    report::run(std::slice::from_ref(&study), &model, &config(&model, 10, 1.0, 4), tmp.path()).unwrap();
    fs::remove_file(tmp.path().join(report::RESPONDENTS_FILE)).unwrap();
    assert!(matches!(report::histograms(tmp.path()), Err(ReportError::Io { .. })));
}

#[test]
fn metrics_reject_runs_over_different_fixtures() {
    let (study, model) = two_logit_study();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    report::run(std::slice::from_ref(&study), &model, &config(&model, 10, 1.0, 4), &a).unwrap();
    let mut other = study.clone();
    other.citation.push_str(" (revised)");
    report::run(std::slice::from_ref(&other), &model, &config(&model, 10, 1.0, 4), &b).unwrap();
    assert!(matches!(report::metrics(&[a, b]), Err(ReportError::Inconsistent(_))));
}

#[test]
fn metrics_expand_sweep_directories() {
    let (study, model) = two_logit_study();
    let tmp = tempfile::tempdir().unwrap();
    report::sweep(std::slice::from_ref(&study), &model, &config(&model, 20, 1.0, 4), &[0.5, 1.5], tmp.path())
        .unwrap();
    let table = report::metrics(&[tmp.path().to_path_buf()]).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("mock,0.5,"));
    assert!(rows[2].starts_with("mock,1.5,"));
}
