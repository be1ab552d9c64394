//! HTTP backend against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use replisim::backends::{Backend, BackendError, GenerationRequest, HttpBackend, HttpConfig, Message, RetryPolicy};
use replisim::sampling::{run_cell, PromptMode, SamplingConfig};
use replisim::StudySpec;
use serde_json::Value;

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: Value,
}

struct Server {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    peak: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut len = 0;
    let mut authorization = None;
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    loop {
        line.clear();
        reader.read_line(&mut line).ok()?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (name, value) = l.split_once(':')?;
        match name.to_ascii_lowercase().as_str() {
            "content-length" => len = value.trim().parse().ok()?,
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen { authorization, body: serde_json::from_slice(&body).ok()? })
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

/// Serve `script` responses in order (the last one repeats), one
/// connection per request, optionally holding each for `delay`.
fn serve(script: Vec<(u16, String)>, delay: Duration) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let peak = Arc::new(AtomicUsize::new(0));
    let live = Arc::new(AtomicUsize::new(0));
    let next = Arc::new(AtomicUsize::new(0));
    let (seen2, peak2) = (seen.clone(), peak.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (seen, peak, live, next, script) =
                (seen2.clone(), peak2.clone(), live.clone(), next.clone(), script.clone());
            thread::spawn(move || {
                let Some(req) = read_request(&mut stream) else { return };
                let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                seen.lock().unwrap().push(req);
                thread::sleep(delay);
                let i = next.fetch_add(1, Ordering::SeqCst).min(script.len() - 1);
                let (status, body) = &script[i];
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                live.fetch_sub(1, Ordering::SeqCst);
                let _ = stream.write_all(reply.as_bytes());
            });
        }
    });
    Server { url, seen, peak }
}

fn quick_retry() -> RetryPolicy {
    RetryPolicy { max_attempts: 3, initial_backoff: Duration::from_millis(5), multiplier: 2.0 }
}

fn backend(url: &str, key: Option<&str>) -> HttpBackend {
    let mut cfg = HttpConfig::new(url, "test-model");
    cfg.retry = quick_retry();
    cfg.timeout = Duration::from_secs(5);
    HttpBackend::with_api_key(cfg, key.map(String::from)).unwrap()
}

fn request() -> GenerationRequest {
    GenerationRequest {
        messages: vec![Message::user("Pick A or B.")],
        temperature: 0.7,
        max_tokens: 16,
        seed: Some(3),
        tag: None,
    }
}

#[test]
fn success_returns_first_choice_and_sends_chat_body() {
    let server = serve(vec![(200, completion("B"))], Duration::ZERO);
    let out = backend(&server.url, Some("sk-test")).generate(&request()).unwrap();
    assert_eq!(out, "B");
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["max_tokens"], 16);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "Pick A or B.");
}

#[test]
fn rate_limit_is_retried_then_succeeds() {
    let server = serve(vec![(429, "{}".into()), (200, completion("A"))], Duration::ZERO);
    assert_eq!(backend(&server.url, None).generate(&request()).unwrap(), "A");
    assert_eq!(server.seen.lock().unwrap().len(), 2);
}

#[test]
fn persistent_rate_limit_gives_up_after_max_attempts() {
    let server = serve(vec![(429, "{}".into())], Duration::ZERO);
    let err = backend(&server.url, None).generate(&request()).unwrap_err();
    assert_eq!(err, BackendError::RateLimited { attempts: 3 });
    assert_eq!(server.seen.lock().unwrap().len(), 3);
}

#[test]
fn auth_failure_is_fatal_and_not_retried() {
    let server = serve(vec![(401, r#"{"error":"bad key"}"#.into())], Duration::ZERO);
    let err = backend(&server.url, Some("nope")).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Auth(_)), "{err:?}");
    assert!(err.is_fatal());
    assert_eq!(server.seen.lock().unwrap().len(), 1);
}

#[test]
fn server_error_is_reported_with_status() {
    let server = serve(vec![(500, "boom".into())], Duration::ZERO);
    let err = backend(&server.url, None).generate(&request()).unwrap_err();
    assert_eq!(err, BackendError::Status { status: 500, body: "boom".into() });
    assert!(!err.is_fatal());
}

#[test]
fn malformed_success_body_is_an_error() {
    let server = serve(vec![(200, r#"{"choices": []}"#.into())], Duration::ZERO);
    let err = backend(&server.url, None).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse(_)), "{err:?}");
}

#[test]
fn unreachable_endpoint_is_a_transport_failure() {
    let err = backend("http://127.0.0.1:1/v1/chat/completions", None).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 3, .. }), "{err:?}");
}

#[test]
fn invalid_request_is_rejected_before_sending() {
    let server = serve(vec![(200, completion("A"))], Duration::ZERO);
    let mut req = request();
    req.temperature = 0.0;
    let err = backend(&server.url, None).generate(&req).unwrap_err();
    assert!(matches!(err, BackendError::InvalidRequest(_)));
    assert!(server.seen.lock().unwrap().is_empty());
}

#[test]
fn audit_log_records_every_attempt() {
    let server = serve(vec![(429, "{}".into()), (200, completion("A"))], Duration::ZERO);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.jsonl");
    let mut cfg = HttpConfig::new(&server.url, "test-model");
    cfg.retry = quick_retry();
    cfg.audit_log = Some(log.clone());
    let b = HttpBackend::with_api_key(cfg, None).unwrap();
    b.generate(&request()).unwrap();
    drop(b);
    let lines: Vec<Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["status"], 429);
    assert_eq!(lines[1]["status"], 200);
    assert_eq!(lines[1]["attempt"], 2);
    assert_eq!(lines[1]["request"]["model"], "test-model");
}

#[test]
fn in_flight_requests_are_capped() {
    let server = serve(vec![(200, completion("A"))], Duration::from_millis(40));
    let mut cfg = HttpConfig::new(&server.url, "test-model");
    cfg.max_in_flight = 2;
    let b = Arc::new(HttpBackend::with_api_key(cfg, None).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let b = b.clone();
            thread::spawn(move || b.generate(&request()).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(server.seen.lock().unwrap().len(), 8);
    assert!(server.peak.load(Ordering::SeqCst) <= 2);
}

#[test]
fn a_cell_can_be_sampled_over_http() {
    let study: StudySpec = StudySpec::from_toml_str(
        include_str!("../fixtures/studies/Hauser_2007.toml"),
        std::path::Path::new("Hauser_2007.toml"),
    )
    .unwrap();
    let server = serve(vec![(200, completion("Answer 1: A"))], Duration::ZERO);
    let mut cfg = HttpConfig::new(&server.url, "test-model");
    cfg.max_in_flight = 4;
    let b = HttpBackend::with_api_key(cfg, None).unwrap();
    let config = SamplingConfig { n_samples: 10, temperature: 1.0, mode: PromptMode::Batch, ..SamplingConfig::default() };
    let cell = run_cell(&b, &study, &config).unwrap();
    let [a, c] = cell.result.unwrap();
    assert_eq!(a.records.len(), 10);
    assert_eq!(c.records.len(), 10);
    assert!(a.labels("permissible").iter().all(|&l| l == 'A'));
    assert_eq!(server.seen.lock().unwrap().len(), 20);
}
