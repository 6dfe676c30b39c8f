//! Automated judges: metric comparators and remote generative models.
//!
//! A metric judge compares two externally computed scores. A generative
//! judge is queried over HTTP `rollouts_k` times and the parsed rollouts are
//! majority-voted into one verdict.

mod benchmark;
mod client;
mod parse;
mod prompt;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use benchmark::{run_benchmark, BenchmarkOptions, BenchmarkSummary, Judge, PairFailure};
pub use client::{AudioResolver, ChatClient, ChatContent, ChatMessage, GenerativeJudge};
pub use parse::{parse_verdict, Rollout, RolloutError, SCORE_MAX, SCORE_MIN};
pub use prompt::{render_prompt, Exemplar, PromptDocument, PromptMode, Segment};

use crate::model::JudgePreference;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("few-shot prompt needs {needed} exemplars, got {got}")]
    MissingExemplars { needed: usize, got: usize },
    #[error("cannot vote over zero rollouts")]
    EmptyRollouts,
    #[error("endpoint rejected credentials (HTTP {0})")]
    AuthError(u16),
    #[error("transport failure after {attempts} attempts: {message}")]
    TransportError { attempts: u32, message: String },
    #[error("audio `{audio_id}` could not be resolved: {message}")]
    AudioUnresolvable { audio_id: String, message: String },
    #[error("invalid judge config: {0}")]
    Config(String),
    #[error("no score for audio `{audio_id}` from source `{source_name}`")]
    MissingScore { audio_id: String, source_name: String },
    #[error("pair `{0}` is not in the corpus")]
    UnknownPair(String),
    #[error("verdict store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 200,
            max_backoff_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricJudgeConfig {
    pub direction: Direction,
    pub score_source: String,
}

fn default_k() -> usize {
    1
}
fn default_temperature() -> f64 {
    0.7
}
fn default_parallel() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeJudgeConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub prompt_mode: PromptMode,
    #[serde(default = "default_k")]
    pub rollouts_k: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Base directory for relative audio paths.
    #[serde(default)]
    pub audio_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeKind {
    Metric(MetricJudgeConfig),
    Generative(GenerativeJudgeConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub judge_id: String,
    #[serde(flatten)]
    pub kind: JudgeKind,
    /// Abstention scoring used by reports unless overridden.
    #[serde(default)]
    pub abstain_policy: crate::report::AbstainPolicy,
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.judge_id.trim().is_empty() {
            return Err(JudgeError::Config("judge_id is empty".into()));
        }
        if let JudgeKind::Generative(g) = &self.kind {
            if g.rollouts_k < 1 {
                return Err(JudgeError::Config("rollouts_k must be at least 1".into()));
            }
            if g.max_parallel < 1 {
                return Err(JudgeError::Config("max_parallel must be at least 1".into()));
            }
            if g.retry.max_attempts < 1 {
                return Err(JudgeError::Config("retry.max_attempts must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Reads a TOML (`.toml`) or JSON config file.
    pub fn load(path: &Path) -> Result<JudgeConfig, JudgeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| JudgeError::Config(format!("{}: {e}", path.display())))?;
        let cfg: JudgeConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| JudgeError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| JudgeError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mode_name(&self) -> String {
        match &self.kind {
            JudgeKind::Metric(_) => "metric".into(),
            JudgeKind::Generative(g) => g.prompt_mode.to_string(),
        }
    }
}

/// Compares two metric scores. Exact equality abstains.
pub fn metric_verdict(
    score_a: f64,
    score_b: f64,
    direction: Direction,
) -> Result<JudgePreference, JudgeError> {
    if !score_a.is_finite() || !score_b.is_finite() {
        return Err(JudgeError::NonFiniteScore);
    }
    if score_a == score_b {
        return Ok(JudgePreference::Abstain);
    }
    let a_wins = match direction {
        Direction::LowerBetter => score_a < score_b,
        Direction::HigherBetter => score_a > score_b,
    };
    Ok(if a_wins {
        JudgePreference::A
    } else {
        JudgePreference::B
    })
}

/// Majority over non-abstaining rollouts; ties and all-abstain abstain.
pub fn vote(rollouts: &[Rollout]) -> Result<JudgePreference, JudgeError> {
    if rollouts.is_empty() {
        return Err(JudgeError::EmptyRollouts);
    }
    let count = |p| rollouts.iter().filter(|r| r.preference == p).count();
    let (a, b) = (count(JudgePreference::A), count(JudgePreference::B));
    Ok(match a.cmp(&b) {
        std::cmp::Ordering::Greater => JudgePreference::A,
        std::cmp::Ordering::Less => JudgePreference::B,
        std::cmp::Ordering::Equal => JudgePreference::Abstain,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub total_ms: u64,
    pub mean_ms: f64,
    pub max_ms: u64,
}

impl LatencyStats {
    pub fn from_rollouts(rollouts: &[Rollout]) -> LatencyStats {
        let total: u64 = rollouts.iter().map(|r| r.latency_ms).sum();
        LatencyStats {
            total_ms: total,
            mean_ms: if rollouts.is_empty() {
                0.0
            } else {
                total as f64 / rollouts.len() as f64
            },
            max_ms: rollouts.iter().map(|r| r.latency_ms).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub pair_id: String,
    pub judge_id: String,
    pub mode: String,
    pub rollouts: Vec<Rollout>,
    pub final_preference: JudgePreference,
    #[serde(default)]
    pub latency: LatencyStats,
}

impl JudgeVerdict {
    pub fn retries(&self) -> u32 {
        self.rollouts.iter().map(|r| r.retries).sum()
    }
}

/// One line of a metric score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub audio_id: String,
    pub score_source: String,
    pub value: f64,
}

/// Metric scores keyed by (audio id, score source).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    scores: HashMap<(String, String), f64>,
}

impl ScoreTable {
    pub fn insert(&mut self, rec: ScoreRecord) {
        self.scores.insert((rec.audio_id, rec.score_source), rec.value);
    }

    pub fn get(&self, audio_id: &str, source: &str) -> Option<f64> {
        self.scores
            .get(&(audio_id.to_owned(), source.to_owned()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl FromIterator<ScoreRecord> for ScoreTable {
    fn from_iter<T: IntoIterator<Item = ScoreRecord>>(iter: T) -> Self {
        let mut t = ScoreTable::default();
        for r in iter {
            t.insert(r);
        }
        t
    }
}

/// Append-only line-delimited file of verdicts.
pub struct VerdictStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl VerdictStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<VerdictStore, JudgeError> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| JudgeError::Store(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| JudgeError::Store(format!("{}: {e}", path.display())))?;
        Ok(VerdictStore {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All verdicts written so far. A torn final line is ignored.
    pub fn load(&self) -> Result<Vec<JudgeVerdict>, JudgeError> {
        read_verdicts(&self.path)
    }

    pub fn append(&self, verdict: &JudgeVerdict) -> Result<(), JudgeError> {
        let mut line = serde_json::to_string(verdict).map_err(|e| JudgeError::Store(e.to_string()))?;
        line.push('\n');
        let mut f = self.file.lock().expect("verdict store lock");
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| JudgeError::Store(e.to_string()))
    }
}

pub fn read_verdicts(path: &Path) -> Result<Vec<JudgeVerdict>, JudgeError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(JudgeError::Store(e.to_string())),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| JudgeError::Store(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            Err(e) => tracing::warn!("skipping unreadable verdict line: {e}"),
        }
    }
    Ok(out)
}

/// Latest verdict per pair for one judge.
pub fn latest_by_pair(verdicts: &[JudgeVerdict], judge_id: &str) -> BTreeMap<String, JudgeVerdict> {
    verdicts
        .iter()
        .filter(|v| v.judge_id == judge_id)
        .map(|v| (v.pair_id.clone(), v.clone()))
        .collect()
}
