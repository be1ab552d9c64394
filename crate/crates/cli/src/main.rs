use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use replisim::backends::{HttpConfig, MockRespondentModel, DEFAULT_API_KEY_ENV};
use replisim::report::{self, BackendConfig, ReportError, RunConfig};
use replisim::sampling::{PromptMode, SamplingConfig};
use replisim::{load_studies, StudySpec};

const EXIT_USAGE: u8 = 1;
const EXIT_BACKEND: u8 = 2;

const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";

/// Replicate survey experiments with language-model respondents.
#[derive(Parser)]
#[command(name = "replisim", version)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every study once at a single temperature.
    Run(RunArgs),
    /// Run every study at each temperature of a grid.
    Sweep(SweepArgs),
    /// Write per-question answer histograms for a finished run.
    Histograms {
        #[arg(long)]
        run: PathBuf,
    },
    /// Consolidate metrics across runs or sweeps.
    Metrics {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Http,
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Batch,
    Sequential,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Batch => PromptMode::Batch,
            ModeArg::Sequential => PromptMode::Sequential,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Directory of study TOML files.
    #[arg(long)]
    studies: PathBuf,
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    #[arg(long, default_value = "mock")]
    model: String,
    /// Respondents per condition.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, value_enum, default_value = "batch")]
    mode: ModeArg,
    #[arg(long, default_value_t = replisim::verdict::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Mock logits file; the bundled model is used when omitted.
    #[arg(long)]
    mock_model: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    endpoint: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    #[arg(long, default_value_t = 8)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 64)]
    max_tokens: u32,
    /// Append every HTTP exchange to this JSONL file.
    #[arg(long)]
    audit_log: Option<PathBuf>,
    #[arg(long, default_value_t = 0.20)]
    max_invalid_fraction: f64,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    temperature: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated grid, e.g. 0.1,0.5,1.0,1.5
    #[arg(long, value_delimiter = ',', required = true)]
    temperatures: Vec<f64>,
}

enum Failure {
    Usage(String),
    Backend(String),
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        if e.is_backend_failure() {
            Failure::Backend(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn load(dir: &Path) -> Result<Vec<StudySpec>, Failure> {
    let studies = load_studies(dir).map_err(|e| Failure::Usage(e.to_string()))?;
    if studies.is_empty() {
        return Err(Failure::Usage(format!("no study files in {}", dir.display())));
    }
    Ok(studies)
}

fn build_config(c: &CommonArgs, temperature: f64, studies: &[StudySpec]) -> Result<RunConfig, Failure> {
    let backend = match c.backend {
        BackendKind::Mock => {
            let model = match &c.mock_model {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                    MockRespondentModel::from_toml_str(&text)
                        .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
                }
                None => report::bundled_mock_model(),
            };
            if let Err(e) = model.check_coverage(studies) {
                log::warn!("{e}; affected studies will be discarded");
            }
            BackendConfig::Mock { model }
        }
        BackendKind::Http => {
            let mut cfg = HttpConfig::new(c.endpoint.clone(), c.model.clone());
            cfg.api_key_env = c.api_key_env.clone();
            cfg.max_in_flight = c.max_in_flight.max(1);
            cfg.timeout = Duration::from_secs(c.timeout.max(1));
            cfg.audit_log = c.audit_log.clone();
            BackendConfig::Http(cfg)
        }
    };
    let config = RunConfig {
        model: c.model.clone(),
        studies_dir: c.studies.display().to_string(),
        alpha: c.alpha,
        sampling: SamplingConfig {
            n_samples: c.n,
            temperature,
            mode: c.mode.into(),
            max_invalid_fraction: c.max_invalid_fraction,
            seed: c.seed,
            max_tokens: c.max_tokens,
        },
        backend,
    };
    config.validate()?;
    Ok(config)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let studies = load(&args.common.studies)?;
    let config = build_config(&args.common, args.temperature, &studies)?;
    let backend = config.backend.build().map_err(|e| Failure::Backend(e.to_string()))?;
    let output = report::run(&studies, backend.as_ref(), &config, &args.common.out)?;
    if output.all_backend_failures() {
        return Err(Failure::Backend("every study failed at the backend".into()));
    }
    print!("{}", report::effects_csv(&output.manifest.records));
    let m = &output.manifest.metrics;
    eprintln!(
        "{} studies evaluated, {} unusable; results in {}",
        m.studies_evaluated,
        m.unusable,
        args.common.out.display()
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let studies = load(&args.common.studies)?;
    let first = *args.temperatures.first().expect("clap requires one temperature");
    let config = build_config(&args.common, first, &studies)?;
    for &t in &args.temperatures {
        config.at_temperature(t).validate()?;
    }
    let backend = config.backend.build().map_err(|e| Failure::Backend(e.to_string()))?;
    let runs = report::sweep(&studies, backend.as_ref(), &config, &args.temperatures, &args.common.out)?;
    let rows: Vec<_> = runs
        .iter()
        .map(|m| (m.config.model.as_str(), m.config.sampling.temperature, &m.metrics))
        .collect();
    print!("{}", report::metrics_csv(&rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Histograms { run } => report::histograms(&run).map_err(Failure::from).map(|s| {
            eprintln!("{} histograms written, {} cells skipped", s.written.len(), s.skipped.len());
        }),
        Command::Metrics { runs, out } => report::metrics(&runs).map_err(Failure::from).and_then(|csv| {
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Backend(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_BACKEND)
        }
    }
}
