use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

fn studies() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/studies")
}

fn replisim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_replisim"))
        .args(args)
        .env_remove("OPENAI_API_KEY")
        .output()
        .expect("binary runs")
}

fn run_args<'a>(out: &'a str, studies: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["run", "--studies", studies, "--temperature", "1.0", "--seed", "7", "--out", out];
    v.extend_from_slice(extra);
    v
}

#[test]
fn run_writes_all_outputs_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let s = studies();
    let s = s.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = replisim(&run_args(dir.to_str().unwrap(), s, &["--n", "200"]));
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["run.json", "respondents.jsonl", "effects.csv", "metrics.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let effects = std::fs::read_to_string(a.join("effects.csv")).unwrap();
    assert_eq!(effects.lines().count(), 15);
    assert!(effects.contains("1.0,Inbar_2009,†,†"));
}

#[test]
fn sequential_mode_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let s = studies();
    let out = replisim(&run_args(tmp.path().to_str().unwrap(), s.to_str().unwrap(), &["--mode", "sequential", "--n", "50"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_then_histograms_then_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep_dir = tmp.path().join("sweep");
    let s = studies();
    let out = replisim(&[
        "sweep",
        "--studies",
        s.to_str().unwrap(),
        "--temperatures",
        "0.1,0.5,1.0,1.5",
        "--n",
        "100",
        "--seed",
        "1",
        "--out",
        sweep_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 5);
    assert!(sweep_dir.join("sweep_matrix.csv").is_file());

    let run_dir = sweep_dir.join("t_0.5");
    let out = replisim(&["histograms", "--run", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(run_dir.join("histograms/Knobe_2003__harm__intentional.csv").is_file());
    assert!(run_dir.join("histograms/skipped.csv").is_file());

    let table = tmp.path().join("metrics.csv");
    let out = replisim(&["metrics", "--runs", sweep_dir.to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(table).unwrap();
    assert_eq!(text, std::fs::read_to_string(sweep_dir.join("metrics.csv")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().to_str().unwrap();
    let s = studies();
    let s = s.to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--studies", s, "--temperature", "1.0"],
        run_args(out_dir, s, &["--mode", "parallel"]),
        run_args(out_dir, s, &["--alpha", "2"]),
        run_args(out_dir, s, &["--temperatures", "0.5"]),
        run_args(out_dir, s, &["--n", "1"]),
        run_args(out_dir, "/no/such/dir", &["--n", "10"]),
        vec!["histograms", "--run", "/no/such/run"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = replisim(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn help_and_version_exit_cleanly() {
    for flag in ["--help", "--version"] {
        let out = replisim(&[flag]);
        assert_eq!(out.status.code(), Some(0));
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn rejected_credentials_exit_with_two() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            thread::spawn(move || {
                let mut buf = [0u8; 8192];
                let _ = stream.read(&mut buf);
                let body = r#"{"error":"invalid api key"}"#;
                let _ = write!(
                    stream,
                    "HTTP/1.1 401 Unauthorized\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            });
        }
    });
    let tmp = tempfile::tempdir().unwrap();
    let s = studies();
    let out = replisim(&run_args(
        tmp.path().to_str().unwrap(),
        s.to_str().unwrap(),
        &["--backend", "http", "--model", "some-model", "--endpoint", &url, "--n", "2"],
    ));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("authentication"));
}
