//! Deterministic in-process stand-in for a chat-completion judge endpoint.
//!
//! Replies come from a caller-supplied script keyed by the queried pair
//! (the `audio_id` of its first audio, i.e. the second-to-last audio part of
//! the request) or by the empty string for text-only requests. The n-th call
//! for a key gets the n-th scripted reply, cycling. Request counts and the
//! peak number of concurrent requests are recorded.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::oneshot;

/// What the mock saw in one request.
#[derive(Debug, Clone)]
pub struct MockRequest {
    pub model: String,
    pub temperature: f64,
    pub audio_ids: Vec<String>,
    pub texts: Vec<String>,
    pub roles: Vec<String>,
    pub authorization: Option<String>,
    pub key: String,
    /// Zero-based index of this request among requests with the same key.
    pub key_index: usize,
    /// Zero-based index of this request among all requests.
    pub global_index: usize,
}

#[derive(Debug, Clone)]
pub enum MockReply {
    Text(String),
    Status(u16),
}

type Handler = dyn Fn(&MockRequest) -> MockReply + Send + Sync;

#[derive(Default)]
struct Counters {
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    per_key: Mutex<HashMap<String, usize>>,
}

#[derive(Clone)]
struct MockState {
    handler: Arc<Handler>,
    counters: Arc<Counters>,
    delay: Duration,
}

pub struct MockEndpoint {
    addr: SocketAddr,
    counters: Arc<Counters>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockEndpoint {
    /// Starts a mock answering every request through `handler`.
    pub async fn start<F>(delay: Duration, handler: F) -> std::io::Result<MockEndpoint>
    where
        F: Fn(&MockRequest) -> MockReply + Send + Sync + 'static,
    {
        let counters = Arc::new(Counters::default());
        let state = MockState {
            handler: Arc::new(handler),
            counters: counters.clone(),
            delay,
        };
        let app = Router::new()
            .route("/v1/chat", post(handle))
            .with_state(state);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(MockEndpoint {
            addr,
            counters,
            shutdown: Some(tx),
        })
    }

    /// Replies cycle through `script[key]`; unknown keys get `fallback`.
    pub async fn scripted(
        delay: Duration,
        script: HashMap<String, Vec<String>>,
        fallback: String,
    ) -> std::io::Result<MockEndpoint> {
        MockEndpoint::start(delay, move |req| match script.get(&req.key) {
            Some(replies) if !replies.is_empty() => {
                MockReply::Text(replies[req.key_index % replies.len()].clone())
            }
            _ => MockReply::Text(fallback.clone()),
        })
        .await
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat", self.addr)
    }

    pub fn requests(&self) -> usize {
        self.counters.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.counters.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn requests_for(&self, key: &str) -> usize {
        self.counters
            .per_key
            .lock()
            .expect("mock counters")
            .get(key)
            .copied()
            .unwrap_or(0)
    }
}

impl Drop for MockEndpoint {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn handle(State(state): State<MockState>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let c = &state.counters;
    let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    let _guard = InFlight(&c.in_flight);
    c.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let global_index = c.requests.fetch_add(1, Ordering::SeqCst);

    let mut audio_ids = Vec::new();
    let mut texts = Vec::new();
    let mut roles = Vec::new();
    for msg in body["messages"].as_array().into_iter().flatten() {
        roles.push(msg["role"].as_str().unwrap_or_default().to_owned());
        for part in msg["content"].as_array().into_iter().flatten() {
            match part["type"].as_str() {
                Some("audio") => audio_ids.push(part["audio_id"].as_str().unwrap_or_default().to_owned()),
                Some("text") => texts.push(part["text"].as_str().unwrap_or_default().to_owned()),
                _ => {}
            }
        }
    }
    let key = if audio_ids.len() >= 2 {
        audio_ids[audio_ids.len() - 2].clone()
    } else {
        String::new()
    };
    let key_index = {
        let mut per_key = c.per_key.lock().expect("mock counters");
        let n = per_key.entry(key.clone()).or_default();
        *n += 1;
        *n - 1
    };
    let req = MockRequest {
        model: body["model"].as_str().unwrap_or_default().to_owned(),
        temperature: body["temperature"].as_f64().unwrap_or_default(),
        audio_ids,
        texts,
        roles,
        authorization: headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned),
        key,
        key_index,
        global_index,
    };
    if !state.delay.is_zero() {
        tokio::time::sleep(state.delay).await;
    }
    match (state.handler)(&req) {
        MockReply::Text(text) => Json(json!({ "choices": [{ "text": text }] })).into_response(),
        MockReply::Status(code) => (
            StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            "scripted failure",
        )
            .into_response(),
    }
}
