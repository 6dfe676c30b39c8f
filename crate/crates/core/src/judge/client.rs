//! HTTP client for chat-style completion endpoints.
//!
//! Wire contract: `POST {model, messages, temperature, n}` answered by
//! `{choices: [{text}]}`. Audio travels inline as base64 content parts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use super::{
    parse_verdict, vote, GenerativeJudgeConfig, JudgeConfig, JudgeError, JudgeKind, JudgeVerdict,
    LatencyStats, PromptDocument, RetryPolicy, Segment,
};
use crate::model::SpeechPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChatContent {
    Text {
        text: String,
    },
    Audio {
        audio_id: String,
        format: String,
        data: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ChatContent>,
}

impl ChatMessage {
    pub fn text(role: &str, text: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: role.to_owned(),
            content: vec![ChatContent::Text { text: text.into() }],
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    n: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    message: Option<ChoiceMessage>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

/// A completion and how much it cost to obtain.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
    pub latency_ms: u64,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(JudgeError),
}

/// Bounded-parallel client with retry and exponential backoff.
#[derive(Clone)]
pub struct ChatClient {
    http: reqwest::Client,
    endpoint: String,
    model: String,
    temperature: f64,
    token: Option<String>,
    retry: RetryPolicy,
    permits: Arc<Semaphore>,
}

impl ChatClient {
    pub fn new(
        endpoint: &str,
        model: &str,
        temperature: f64,
        max_parallel: usize,
        retry: RetryPolicy,
        api_key_env: Option<&str>,
        timeout: Duration,
    ) -> Result<ChatClient, JudgeError> {
        if max_parallel == 0 {
            return Err(JudgeError::Config("max_parallel must be at least 1".into()));
        }
        let token = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                JudgeError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| JudgeError::Config(e.to_string()))?;
        Ok(ChatClient {
            http,
            endpoint: endpoint.to_owned(),
            model: model.to_owned(),
            temperature,
            token,
            retry,
            permits: Arc::new(Semaphore::new(max_parallel)),
        })
    }

    pub(crate) fn http(&self) -> &reqwest::Client {
        &self.http
    }

    async fn attempt(&self, messages: &[ChatMessage]) -> Attempt {
        let _permit = self.permits.acquire().await.expect("semaphore is never closed");
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: self.temperature,
            n: 1,
        };
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Attempt::Fatal(JudgeError::AuthError(status.as_u16()));
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !status.is_success() {
            return Attempt::Fatal(JudgeError::TransportError {
                attempts: 1,
                message: format!("HTTP {status}"),
            });
        }
        match resp.json::<ChatResponse>().await {
            Ok(parsed) => match parsed.choices.into_iter().next() {
                Some(Choice { text: Some(t), .. }) => Attempt::Done(t),
                Some(Choice { message: Some(m), .. }) => Attempt::Done(m.content),
                _ => Attempt::Retry("response has no choices".into()),
            },
            Err(e) => Attempt::Retry(format!("malformed response: {e}")),
        }
    }

    fn backoff(&self, retry_index: u32) -> Duration {
        let ms = self
            .retry
            .initial_backoff_ms
            .saturating_mul(1u64 << retry_index.min(20))
            .min(self.retry.max_backoff_ms);
        Duration::from_millis(ms)
    }

    /// One sampled completion, retried on transport failures.
    pub async fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, JudgeError> {
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                tokio::time::sleep(self.backoff(attempt - 1)).await;
            }
            match self.attempt(messages).await {
                Attempt::Done(text) => {
                    return Ok(Completion {
                        text,
                        retries: attempt,
                        latency_ms: start.elapsed().as_millis() as u64,
                    })
                }
                Attempt::Fatal(JudgeError::TransportError { message, .. }) => {
                    return Err(JudgeError::TransportError {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    tracing::debug!(attempt, "retrying completion: {msg}");
                    last = msg;
                }
            }
        }
        Err(JudgeError::TransportError {
            attempts: self.retry.max_attempts,
            message: last,
        })
    }
}

/// Loads audio bytes for prompt attachments.
#[derive(Clone)]
pub struct AudioResolver {
    root: Option<PathBuf>,
    http: reqwest::Client,
}

impl AudioResolver {
    pub fn new(root: Option<PathBuf>, http: reqwest::Client) -> AudioResolver {
        AudioResolver { root, http }
    }

    pub fn local(root: Option<PathBuf>) -> AudioResolver {
        AudioResolver::new(root, reqwest::Client::new())
    }

    /// Path of a non-URL uri, joined to the root when relative.
    pub fn local_path(&self, uri: &str) -> PathBuf {
        let raw = uri.strip_prefix("file://").unwrap_or(uri);
        let p = Path::new(raw);
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub async fn fetch(&self, audio_id: &str, uri: &str) -> Result<Vec<u8>, JudgeError> {
        let unresolvable = |message: String| JudgeError::AudioUnresolvable {
            audio_id: audio_id.to_owned(),
            message,
        };
        if uri.starts_with("http://") || uri.starts_with("https://") {
            let resp = self
                .http
                .get(uri)
                .send()
                .await
                .map_err(|e| unresolvable(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(unresolvable(format!("HTTP {}", resp.status())));
            }
            let bytes = resp.bytes().await.map_err(|e| unresolvable(e.to_string()))?;
            return Ok(bytes.to_vec());
        }
        let path = self.local_path(uri);
        tokio::fs::read(&path)
            .await
            .map_err(|e| unresolvable(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn audio_format(uri: &str) -> String {
    Path::new(uri.split('?').next().unwrap_or(uri))
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_else(|| "wav".into())
}

/// Generative judge bound to one endpoint.
pub struct GenerativeJudge {
    judge_id: String,
    config: GenerativeJudgeConfig,
    client: ChatClient,
    audio: AudioResolver,
}

impl GenerativeJudge {
    pub fn new(config: &JudgeConfig) -> Result<GenerativeJudge, JudgeError> {
        config.validate()?;
        let JudgeKind::Generative(g) = &config.kind else {
            return Err(JudgeError::Config(format!(
                "judge `{}` is not generative",
                config.judge_id
            )));
        };
        let client = ChatClient::new(
            &g.endpoint,
            &g.model,
            g.temperature,
            g.max_parallel,
            g.retry.clone(),
            g.api_key_env.as_deref(),
            Duration::from_secs(g.timeout_secs),
        )?;
        let audio = AudioResolver::new(g.audio_root.clone(), client.http().clone());
        Ok(GenerativeJudge {
            judge_id: config.judge_id.clone(),
            config: g.clone(),
            client,
            audio,
        })
    }

    pub fn judge_id(&self) -> &str {
        &self.judge_id
    }

    pub fn config(&self) -> &GenerativeJudgeConfig {
        &self.config
    }

    async fn build_message(&self, prompt: &PromptDocument) -> Result<ChatMessage, JudgeError> {
        let mut loaded: HashMap<&str, String> = HashMap::new();
        for seg in &prompt.segments {
            if let Segment::Audio { audio_id, uri } = seg {
                if !loaded.contains_key(audio_id.as_str()) {
                    let bytes = self.audio.fetch(audio_id, uri).await?;
                    loaded.insert(
                        audio_id,
                        base64::engine::general_purpose::STANDARD.encode(bytes),
                    );
                }
            }
        }
        let content = prompt
            .segments
            .iter()
            .map(|seg| match seg {
                Segment::Text { text } => ChatContent::Text { text: text.clone() },
                Segment::Audio { audio_id, uri } => ChatContent::Audio {
                    audio_id: audio_id.clone(),
                    format: audio_format(uri),
                    data: loaded[audio_id.as_str()].clone(),
                },
            })
            .collect();
        Ok(ChatMessage {
            role: "user".into(),
            content,
        })
    }

    /// Runs `rollouts_k` sampled completions and votes over them.
    pub async fn judge(
        &self,
        pair: &SpeechPair,
        prompt: &PromptDocument,
    ) -> Result<JudgeVerdict, JudgeError> {
        let message = [self.build_message(prompt).await?];
        let results = join_all((0..self.config.rollouts_k).map(|_| self.client.complete(&message))).await;
        let mut rollouts = Vec::with_capacity(results.len());
        for r in results {
            let c = r?;
            let mut rollout = parse_verdict(&c.text);
            rollout.retries = c.retries;
            rollout.latency_ms = c.latency_ms;
            rollouts.push(rollout);
        }
        let final_preference = vote(&rollouts)?;
        Ok(JudgeVerdict {
            pair_id: pair.pair_id.clone(),
            judge_id: self.judge_id.clone(),
            mode: prompt.mode.to_string(),
            latency: LatencyStats::from_rollouts(&rollouts),
            rollouts,
            final_preference,
        })
    }
}
