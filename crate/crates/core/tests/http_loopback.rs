//! The HTTP backend against a real socket on localhost.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use care_core::backend::{
    BackendError, CallContext, HttpBackend, HttpConfig, ModelBackend, ModelRequest, RetryPolicy, TranscriptStore,
};
use care_core::{ImagePayload, Provenance, Role, SamplingParams};

/// Serves the scripted `(status, body)` replies in order, one per connection,
/// and records each request's head and body.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock()
                .unwrap()
                .push(format!("{head}\n{}", String::from_utf8(buf).unwrap()));
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (url, seen, handle)
}

fn request() -> ModelRequest {
    ModelRequest {
        role: Role::Baseline,
        prompt: "Which one?".into(),
        images: vec![ImagePayload::new("image/png", vec![1, 2, 3])],
        sampling: SamplingParams::default(),
        context: CallContext::default(),
    }
}

fn backend(url: String, store: Arc<TranscriptStore>) -> HttpBackend {
    std::env::set_var("CARE_LOOPBACK_TOKEN", "sekret");
    let config = HttpConfig {
        endpoint: url,
        model: "test-model".into(),
        auth_env: Some("CARE_LOOPBACK_TOKEN".into()),
        auth_header: "Authorization".into(),
        auth_prefix: "Bearer ".into(),
        use_cache: true,
        timeout_secs: 10,
    };
    HttpBackend::new(config, store, RetryPolicy::default())
        .unwrap()
        .with_sleeper(|_| {})
}

#[test]
fn retries_then_caches_and_never_stores_the_token() {
    let ok = r#"{"choices":[{"message":{"content":"FINAL: melanoma"}}]}"#.to_string();
    let (url, seen, server) = serve(vec![(429, "{}".into()), (503, "busy".into()), (200, ok)]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transcript.jsonl");
    let store = Arc::new(TranscriptStore::open(&path).unwrap());
    let b = backend(url, Arc::clone(&store));

    let first = b.complete(&request()).unwrap();
    assert_eq!(first.text, "FINAL: melanoma");
    assert_eq!(first.attempts, 3);
    assert_eq!(first.provenance, Provenance::Live);
    server.join().unwrap();

    let second = b.complete(&request()).unwrap();
    assert_eq!(second.provenance, Provenance::Cache);
    assert_eq!(second.text, first.text);

    let requests = seen.lock().unwrap();
    assert_eq!(requests.len(), 3);
    assert!(requests[0]
        .to_ascii_lowercase()
        .contains("authorization: bearer sekret"));
    assert!(requests[0].contains("data:image/png;base64,AQID"));
    let on_disk = std::fs::read_to_string(&path).unwrap();
    assert!(!on_disk.contains("sekret"));
    assert_eq!(on_disk.lines().count(), 1);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, server) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
    let b = backend(url, Arc::new(TranscriptStore::in_memory()));
    match b.complete(&request()) {
        Err(BackendError::Transport {
            status: Some(400),
            attempts: 1,
            ..
        }) => {}
        other => panic!("unexpected {other:?}"),
    }
    server.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let b = backend(url, Arc::new(TranscriptStore::in_memory()));
    let err = b.complete(&request()).unwrap_err();
    assert!(
        matches!(
            err,
            BackendError::Transport {
                status: None,
                attempts: 3,
                ..
            }
        ),
        "{err:?}"
    );
}
