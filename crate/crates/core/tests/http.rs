//! OpenAI-compatible clients against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use pairsem::providers::{Embedder, HttpConfig, LlmProvider, LlmRequest, OpenAiEmbedder, OpenAiLlm, RetryPolicy};
use pairsem::Error;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves one scripted `(status, body)` per connection, in order, and
/// records every request.
struct Stub {
    base: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl Stub {
    fn start(script: Vec<(u16, Value)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (status, body) in script {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let (mut len, mut auth) = (0, None);
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (name, value) = line.split_once(':').unwrap();
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => len = value.trim().parse().unwrap(),
                        "authorization" => auth = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(Seen {
                    path: request_line.split_whitespace().nth(1).unwrap().to_string(),
                    auth,
                    body: serde_json::from_slice(&buf).unwrap(),
                });
                let text = body.to_string();
                let mut out = stream;
                write!(
                    out,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                )
                .unwrap();
            }
        });
        Self { base, seen }
    }

    fn config(&self, attempts: u32) -> HttpConfig {
        HttpConfig {
            api_base: self.base.clone(),
            api_key: Some("sk-test".into()),
            chat_model: "chat-x".into(),
            embedding_model: "embed-x".into(),
            timeout_secs: 10,
            parallelism: 1,
            retry: RetryPolicy {
                max_attempts: attempts,
                base_delay_ms: 1,
            },
        }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn chat(content: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}],
           "usage": {"prompt_tokens": 12, "completion_tokens": 3}})
}

#[test]
fn chat_completion_request_and_usage() {
    let stub = Stub::start(vec![(200, chat("<pair><entity>x</entity><aspect>y</aspect></pair>"))]);
    let llm = OpenAiLlm::new(stub.config(1));
    let out = llm.generate(&LlmRequest::new("system text", "user text")).unwrap();
    assert_eq!(out.text, "<pair><entity>x</entity><aspect>y</aspect></pair>");
    assert_eq!((out.prompt_tokens, out.completion_tokens), (12, 3));

    let seen = stub.seen();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "chat-x");
    assert_eq!(seen[0].body["messages"][0]["content"], "system text");
    assert_eq!(seen[0].body["messages"][1]["role"], "user");
    assert_eq!(seen[0].body["temperature"], 0.0);
}

#[test]
fn missing_usage_is_estimated() {
    let stub = Stub::start(vec![(200, json!({"choices": [{"message": {"content": "a b c"}}]}))]);
    let out = OpenAiLlm::new(stub.config(1))
        .generate(&LlmRequest::new("one two", "three"))
        .unwrap();
    assert_eq!((out.prompt_tokens, out.completion_tokens), (3, 3));
}

#[test]
fn retries_server_errors_then_succeeds() {
    let stub = Stub::start(vec![
        (503, json!({"error": "busy"})),
        (429, json!({"error": "slow down"})),
        (200, chat("ok")),
    ]);
    let out = OpenAiLlm::new(stub.config(3)).generate(&LlmRequest::new("s", "u")).unwrap();
    assert_eq!(out.text, "ok");
    assert_eq!(stub.seen().len(), 3);
}

#[test]
fn gives_up_after_max_attempts() {
    let stub = Stub::start(vec![(500, json!({})), (500, json!({}))]);
    match OpenAiLlm::new(stub.config(2)).generate(&LlmRequest::new("s", "u")) {
        Err(Error::Transport { attempts, message }) => {
            assert_eq!(attempts, 2);
            assert!(message.contains("500"), "{message}");
        }
        other => panic!("expected a transport error, got {other:?}"),
    }
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(vec![(400, json!({"error": "bad request"})), (200, chat("never"))]);
    match OpenAiLlm::new(stub.config(3)).generate(&LlmRequest::new("s", "u")) {
        Err(Error::Provider { status, body }) => {
            assert_eq!(status, 400);
            assert!(body.contains("bad request"));
        }
        other => panic!("expected a provider error, got {other:?}"),
    }
    assert_eq!(stub.seen().len(), 1);
}

#[test]
fn malformed_chat_response_is_a_provider_error() {
    let stub = Stub::start(vec![(200, json!({"choices": []}))]);
    let err = OpenAiLlm::new(stub.config(1)).generate(&LlmRequest::new("s", "u")).unwrap_err();
    assert!(matches!(err, Error::Provider { status: 200, .. }), "{err:?}");
}

#[test]
fn embeddings_are_batched_and_reordered() {
    let stub = Stub::start(vec![
        (200, json!({"data": [{"index": 1, "embedding": [0.0, 1.0]}, {"index": 0, "embedding": [1.0, 0.0]}]})),
        (200, json!({"data": [{"index": 0, "embedding": [0.5, 0.5]}]})),
    ]);
    let emb = OpenAiEmbedder::new(stub.config(1), 2, 2).unwrap();
    let texts: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let out = emb.embed(&texts).unwrap();
    assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]);

    let seen = stub.seen();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body, json!({"model": "embed-x", "input": ["a", "b"]}));
    assert_eq!(seen[1].body["input"], json!(["c"]));
}

#[test]
fn embedding_shape_errors() {
    let stub = Stub::start(vec![
        (200, json!({"data": [{"index": 0, "embedding": [1.0, 0.0, 0.0]}]})),
        (200, json!({"data": []})),
    ]);
    let emb = OpenAiEmbedder::new(stub.config(1), 2, 8).unwrap();
    let one = vec!["a".to_string()];
    assert!(matches!(emb.embed(&one), Err(Error::DimensionMismatch { expected: 2, actual: 3 })));
    assert!(matches!(emb.embed(&one), Err(Error::Provider { .. })));
    assert!(emb.embed(&[]).is_err());
    assert!(OpenAiEmbedder::new(HttpConfig::default(), 0, 1).is_err());
}
