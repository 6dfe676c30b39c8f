//! Asks a text-only meta-judge whether a CoT verdict's reasoning agrees
//! with its final scores.

use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ReportError;
use crate::judge::{ChatClient, ChatMessage, JudgeError, JudgeVerdict, RetryPolicy};

pub const META_JUDGE_SYSTEM_PROMPT: &str = include_str!("assets/meta_judge_system.txt");

fn default_temperature() -> f64 {
    0.0
}
fn default_parallel() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}
fn default_malformed_attempts() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaJudgeConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Requests per verdict before an unparseable reply becomes an error.
    #[serde(default = "default_malformed_attempts")]
    pub malformed_attempts: u32,
}

impl MetaJudgeConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> MetaJudgeConfig {
        MetaJudgeConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: default_temperature(),
            max_parallel: default_parallel(),
            retry: RetryPolicy::default(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            malformed_attempts: default_malformed_attempts(),
        }
    }

    /// Reads a TOML (`.toml`) or JSON config file.
    pub fn load(path: &std::path::Path) -> Result<MetaJudgeConfig, JudgeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| JudgeError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| JudgeError::Config(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| JudgeError::Config(e.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub pair_id: String,
    /// 1 when reasoning and scores agree.
    pub result: u8,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyFailure {
    pub pair_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Mean `result` over parseable judgments; `None` if there were none.
    pub rate: Option<f64>,
    pub results: Vec<ConsistencyResult>,
    pub failures: Vec<ConsistencyFailure>,
}

impl ConsistencyReport {
    /// One JSON object per line: results, then failures.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        for f in &self.failures {
            out.push_str(&serde_json::to_string(f).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Extracts `(result, reason)` from a meta-judge reply. Tolerates code fences
/// and prose around the object, and `result` given as a string or boolean.
pub fn parse_meta_judgment(reply: &str) -> Option<(u8, String)> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    let obj: Value = serde_json::from_str(&reply[start..=end]).ok()?;
    let result = match &obj["result"] {
        Value::Number(n) => match n.as_f64()? {
            0.0 => 0,
            1.0 => 1,
            _ => return None,
        },
        Value::String(s) => match s.trim() {
            "0" => 0,
            "1" => 1,
            _ => return None,
        },
        Value::Bool(b) => u8::from(*b),
        _ => return None,
    };
    let reason = match &obj["reason"] {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    };
    Some((result, reason))
}

fn cot_text(v: &JudgeVerdict) -> Option<&str> {
    v.rollouts
        .iter()
        .find(|r| r.error.is_none())
        .or_else(|| v.rollouts.first())
        .map(|r| r.raw_text.as_str())
}

async fn check_one(
    client: &ChatClient,
    verdict: &JudgeVerdict,
    attempts: u32,
) -> Result<ConsistencyResult, ReportError> {
    let cot = cot_text(verdict).ok_or_else(|| ReportError::NoCotText(verdict.pair_id.clone()))?;
    let messages = [
        ChatMessage::text("system", META_JUDGE_SYSTEM_PROMPT),
        ChatMessage::text("user", cot),
    ];
    for attempt in 0..attempts.max(1) {
        let completion = client.complete(&messages).await?;
        if let Some((result, reason)) = parse_meta_judgment(&completion.text) {
            return Ok(ConsistencyResult {
                pair_id: verdict.pair_id.clone(),
                result,
                reason,
            });
        }
        tracing::debug!(pair_id = %verdict.pair_id, attempt, "unparseable meta-judgment");
    }
    Err(ReportError::UnparseableMetaJudgment {
        pair_id: verdict.pair_id.clone(),
        attempts: attempts.max(1),
    })
}

/// Runs the meta-judge over every verdict. Per-pair failures are recorded and
/// left out of the rate; an authentication failure aborts.
pub async fn consistency_check(
    verdicts: &[JudgeVerdict],
    config: &MetaJudgeConfig,
) -> Result<ConsistencyReport, ReportError> {
    let client = ChatClient::new(
        &config.endpoint,
        &config.model,
        config.temperature,
        config.max_parallel,
        config.retry.clone(),
        config.api_key_env.as_deref(),
        Duration::from_secs(config.timeout_secs),
    )?;
    let client = &client;
    let outcomes: Vec<_> = stream::iter(verdicts.iter().enumerate())
        .map(|(i, v)| async move { (i, check_one(client, v, config.malformed_attempts).await) })
        .buffer_unordered(config.max_parallel.max(1))
        .collect()
        .await;
    let mut outcomes = outcomes;
    outcomes.sort_by_key(|(i, _)| *i);

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (i, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(ReportError::Judge(e @ JudgeError::AuthError(_))) => return Err(e.into()),
            Err(e) => failures.push(ConsistencyFailure {
                pair_id: verdicts[i].pair_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let rate = (!results.is_empty())
        .then(|| results.iter().map(|r| f64::from(r.result)).sum::<f64>() / results.len() as f64);
    Ok(ConsistencyReport {
        rate,
        results,
        failures,
    })
}
