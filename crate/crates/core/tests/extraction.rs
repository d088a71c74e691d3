use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use physprior::extract::{fixture_file_name, Extractor, ProviderConfig, ProviderMode, TermStatus};
use physprior::toy::toy_graph;
use physprior::Modality;

fn write_fixtures(dir: &std::path::Path) -> Vec<String> {
    let graph = toy_graph();
    let mut vocab = Vec::new();
    for e in graph.entries() {
        let one = physprior::Pckg::new(vec![e.clone()]).unwrap().to_json();
        // A single-entry document is an array; answers are bare objects, so
        // wrap it in prose the way chat models tend to.
        let body = one.trim().trim_start_matches('[').trim_end_matches(']').trim();
        let answer = format!("Here is the record:\n```json\n{body}\n```\n");
        std::fs::write(dir.join(fixture_file_name(&e.category)), answer).unwrap();
        vocab.push(e.category.clone());
    }
    vocab
}

#[test]
fn fixture_extraction_rebuilds_the_graph() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_fixtures(dir.path());
    for workers in [1, 3] {
        let mut cfg = ProviderConfig::fixture(dir.path());
        cfg.parallelism = workers;
        let (graph, report) = Extractor::from_config(&cfg).unwrap().extract_graph(&vocab).unwrap();
        assert_eq!(graph, toy_graph());
        assert!(report.terms.iter().all(|t| t.status == TermStatus::Ok && t.attempts == 1));
        let names: Vec<_> = report.terms.iter().map(|t| t.term.clone()).collect();
        assert_eq!(names, vocab);
    }
}

#[test]
fn missing_fixture_is_a_transport_failure_and_others_survive() {
    let dir = tempfile::tempdir().unwrap();
    let mut vocab = write_fixtures(dir.path());
    vocab.push("glacier".into());
    let (graph, report) = Extractor::from_config(&ProviderConfig::fixture(dir.path()))
        .unwrap()
        .extract_graph(&vocab)
        .unwrap();
    assert_eq!(graph.num_classes(), 4);
    let failed: Vec<_> = report.failures().collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].term, "glacier");
    assert_eq!(failed[0].error_class.as_deref(), Some("transport"));
}

#[test]
fn invalid_fixture_fails_after_retries_with_raw_answers_kept() {
    let dir = tempfile::tempdir().unwrap();
    let bad = r#"{"Category": "dune", "Meaning": "m", "Modifier Analysis": "", "Coarse Class": "bare",
        "NDVI Range": [0.3, 0.1], "DEM Range": [0, 10], "SAR Range": [-10, -5], "Reasoning": "r"}"#;
    std::fs::write(dir.path().join(fixture_file_name("dune")), bad).unwrap();
    let err = Extractor::from_config(&ProviderConfig::fixture(dir.path()))
        .unwrap()
        .extract_entry("dune")
        .unwrap_err();
    match err {
        physprior::Error::Extraction { attempts, raw, .. } => {
            assert_eq!(attempts, 3);
            assert!(raw.contains("\"dune\""));
        }
        other => panic!("unexpected error {other:?}"),
    }
}

/// Minimal HTTP/1.1 server that answers every request with the next queued
/// chat completion and records the request bodies.
fn fake_server(answers: Vec<String>) -> (String, Arc<Mutex<Vec<String>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for answer in answers {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(format!("{auth}\n{}", String::from_utf8(body).unwrap()));
            let payload = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": answer}}]}).to_string();
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

#[test]
fn live_mode_repairs_a_bad_answer_over_http() {
    let good = toy_graph().entry(1).unwrap().clone();
    let one = physprior::Pckg::new(vec![good]).unwrap().to_json();
    let object = one.trim().trim_start_matches('[').trim_end_matches(']').trim().to_string();
    let (url, seen, server) = fake_server(vec!["I think water is wet.".into(), object]);

    let key_env = "PHYSPRIOR_TEST_KEY_LIVE";
    std::env::set_var(key_env, "sekret");
    let cfg = ProviderConfig {
        mode: ProviderMode::Live,
        endpoint: Some(url),
        api_key_env: key_env.into(),
        request_timeout_secs: 10,
        ..ProviderConfig::default()
    };
    let entry = Extractor::from_config(&cfg).unwrap().extract_entry("water").unwrap();
    server.join().unwrap();
    assert_eq!(entry.range(Modality::Sar), toy_graph().interval(1, Modality::Sar).unwrap());

    let requests = seen.lock().unwrap();
    assert_eq!(requests.len(), 2);
    assert!(requests[0].starts_with("Authorization: Bearer sekret"));
    assert!(requests[0].contains("water"));
    // The second prompt carries the first answer back as feedback.
    assert!(requests[1].contains("I think water is wet."));
}

#[test]
fn live_mode_unreachable_endpoint_is_transport() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let cfg = ProviderConfig {
        mode: ProviderMode::Live,
        endpoint: Some(format!("http://{addr}/v1/chat/completions")),
        max_retries: 0,
        request_timeout_secs: 2,
        ..ProviderConfig::default()
    };
    let err = Extractor::from_config(&cfg).unwrap().extract_entry("water").unwrap_err();
    assert_eq!(err.class(), "transport");
}
