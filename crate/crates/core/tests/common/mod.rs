#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

/// Deterministic pseudo log-probability of a token.
pub fn token_logprob(token: &str) -> f64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    -(0.5 + (h % 1000) as f64 / 400.0)
}

/// Completions endpoint double. Scoring requests echo whitespace tokens
/// with [`token_logprob`]; generation requests return the last words of
/// the prompt. After `fail_after` answered requests every request gets 500.
pub struct MockCompletions {
    pub url: String,
    server: Arc<Server>,
    requests: Arc<AtomicUsize>,
    answered: Arc<AtomicUsize>,
    fail_after: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

fn respond(body: &str) -> (u16, String) {
    let req: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(_) => return (400, r#"{"error":"bad json"}"#.into()),
    };
    let prompt = req["prompt"].as_str().unwrap_or_default();
    let max_tokens = req["max_tokens"].as_u64().unwrap_or(0) as usize;
    let words: Vec<&str> = prompt.split_whitespace().collect();
    if max_tokens == 0 && req["echo"] == json!(true) {
        let mut lps = vec![Value::Null];
        lps.extend(words.iter().skip(1).map(|w| json!(token_logprob(w))));
        let mut logprobs = json!({"tokens": words, "token_logprobs": lps});
        if req["vocab_stats"] == json!(true) {
            let mut stats = vec![Value::Null];
            stats.extend(words.iter().skip(1).map(|_| json!([-6.0, 2.0])));
            logprobs["vocab_logprob_stats"] = json!(stats);
        }
        return (
            200,
            json!({"choices": [{"text": prompt, "logprobs": logprobs}]}).to_string(),
        );
    }
    let start = words.len().saturating_sub(max_tokens);
    let text = format!(" {}", words[start..].join(" "));
    (200, json!({"choices": [{"text": text}]}).to_string())
}

impl MockCompletions {
    pub fn start() -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind mock server"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let requests = Arc::new(AtomicUsize::new(0));
        let answered = Arc::new(AtomicUsize::new(0));
        let fail_after = Arc::new(AtomicUsize::new(usize::MAX));
        let handle = {
            let (server, requests, answered, fail_after) =
                (server.clone(), requests.clone(), answered.clone(), fail_after.clone());
            std::thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    requests.fetch_add(1, Ordering::SeqCst);
                    let mut body = String::new();
                    let _ = request.as_reader().read_to_string(&mut body);
                    let (status, text) = if answered.load(Ordering::SeqCst) >= fail_after.load(Ordering::SeqCst) {
                        (500, r#"{"error":"unavailable"}"#.to_string())
                    } else {
                        answered.fetch_add(1, Ordering::SeqCst);
                        respond(&body)
                    };
                    let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap();
                    let _ = request.respond(Response::from_string(text).with_status_code(status).with_header(header));
                }
            })
        };
        Self {
            url: format!("http://127.0.0.1:{port}/v1/completions"),
            server,
            requests,
            answered,
            fail_after,
            handle: Some(handle),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn answered(&self) -> usize {
        self.answered.load(Ordering::SeqCst)
    }

    pub fn fail_after(&self, n: usize) {
        self.fail_after.store(n, Ordering::SeqCst);
    }
}

impl Drop for MockCompletions {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Request seen by a [`Scripted`] server.
#[derive(Debug, Clone)]
pub struct Seen {
    pub body: Value,
    pub authorization: Option<String>,
}

/// Serves canned `(status, body)` replies in order; the last one repeats.
pub struct Scripted {
    pub url: String,
    server: Arc<Server>,
    seen: Arc<std::sync::Mutex<Vec<Seen>>>,
    handle: Option<JoinHandle<()>>,
}

impl Scripted {
    pub fn start(replies: Vec<(u16, String)>) -> Self {
        assert!(!replies.is_empty());
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind scripted server"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let handle = {
            let (server, seen) = (server.clone(), seen.clone());
            std::thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    let mut body = String::new();
                    let _ = request.as_reader().read_to_string(&mut body);
                    let authorization = request
                        .headers()
                        .iter()
                        .find(|h| h.field.equiv("Authorization"))
                        .map(|h| h.value.to_string());
                    let n = {
                        let mut s = seen.lock().unwrap();
                        s.push(Seen {
                            body: serde_json::from_str(&body).unwrap_or(Value::Null),
                            authorization,
                        });
                        s.len()
                    };
                    let (status, text) = &replies[(n - 1).min(replies.len() - 1)];
                    let _ = request.respond(Response::from_string(text.clone()).with_status_code(*status));
                }
            })
        };
        Self {
            url: format!("http://127.0.0.1:{port}/v1/completions"),
            server,
            seen,
            handle: Some(handle),
        }
    }

    pub fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for Scripted {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub fn fixture(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
