//! Resumable batch driver: one verdict per manifest pair.

use std::collections::{BTreeSet, HashMap};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use super::{
    latest_by_pair, metric_verdict, render_prompt, Exemplar, GenerativeJudge, JudgeConfig,
    JudgeError, JudgeKind, JudgeVerdict, LatencyStats, MetricJudgeConfig, PromptMode, Rollout,
    ScoreTable, VerdictStore,
};
use crate::model::SpeechPair;

pub enum Judge {
    Metric {
        judge_id: String,
        config: MetricJudgeConfig,
        scores: ScoreTable,
    },
    Generative(Box<GenerativeJudge>),
}

impl Judge {
    /// Builds a judge; metric judges need their score table up front.
    pub fn from_config(config: &JudgeConfig, scores: Option<ScoreTable>) -> Result<Judge, JudgeError> {
        config.validate()?;
        match &config.kind {
            JudgeKind::Metric(m) => Ok(Judge::Metric {
                judge_id: config.judge_id.clone(),
                config: m.clone(),
                scores: scores.ok_or_else(|| {
                    JudgeError::Config(format!("metric judge `{}` needs a score table", config.judge_id))
                })?,
            }),
            JudgeKind::Generative(_) => Ok(Judge::Generative(Box::new(GenerativeJudge::new(config)?))),
        }
    }

    pub fn judge_id(&self) -> &str {
        match self {
            Judge::Metric { judge_id, .. } => judge_id,
            Judge::Generative(g) => g.judge_id(),
        }
    }

    async fn evaluate(&self, pair: &SpeechPair, exemplars: &[Exemplar]) -> Result<JudgeVerdict, JudgeError> {
        match self {
            Judge::Metric {
                judge_id,
                config,
                scores,
            } => {
                let lookup = |audio_id: &str| {
                    scores
                        .get(audio_id, &config.score_source)
                        .ok_or_else(|| JudgeError::MissingScore {
                            audio_id: audio_id.to_owned(),
                            source_name: config.score_source.clone(),
                        })
                };
                let a = lookup(&pair.audio_a.audio_id)?;
                let b = lookup(&pair.audio_b.audio_id)?;
                let preference = metric_verdict(a, b, config.direction)?;
                let rollouts = vec![Rollout {
                    raw_text: format!("{}: A={a}, B={b}", config.score_source),
                    score_a: Some(a),
                    score_b: Some(b),
                    preference,
                    error: None,
                    retries: 0,
                    latency_ms: 0,
                }];
                Ok(JudgeVerdict {
                    pair_id: pair.pair_id.clone(),
                    judge_id: judge_id.clone(),
                    mode: "metric".into(),
                    latency: LatencyStats::from_rollouts(&rollouts),
                    rollouts,
                    final_preference: preference,
                })
            }
            Judge::Generative(g) => {
                let mode = g.config().prompt_mode;
                let chosen: Vec<Exemplar> = match mode {
                    PromptMode::Fewshot(k) => exemplars
                        .iter()
                        .filter(|e| e.pair.pair_id != pair.pair_id)
                        .take(k)
                        .cloned()
                        .collect(),
                    _ => Vec::new(),
                };
                let prompt = render_prompt(mode, pair, &chosen)?;
                g.judge(pair, &prompt).await
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    /// Pairs evaluated concurrently. Request-level parallelism is capped
    /// separately by the judge's `max_parallel`.
    pub pair_concurrency: usize,
    /// Stop after this many pending pairs have been attempted.
    pub stop_after: Option<usize>,
    /// Exemplar pool for few-shot prompts, taken in order.
    pub exemplars: Vec<Exemplar>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            pair_concurrency: 8,
            stop_after: None,
            exemplars: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub pair_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub total: usize,
    /// Pairs that already had a verdict in the store.
    pub skipped: usize,
    pub completed: usize,
    pub failures: Vec<PairFailure>,
}

/// Judges every manifest pair that has no stored verdict yet.
///
/// Verdicts are appended as they complete, so an interrupted run can be
/// resumed by calling this again with the same store. Per-pair failures are
/// collected; authentication failures abort the run.
pub async fn run_benchmark(
    judge: &Judge,
    manifest: &[String],
    corpus: &HashMap<String, SpeechPair>,
    store: &VerdictStore,
    opts: &BenchmarkOptions,
) -> Result<BenchmarkSummary, JudgeError> {
    let done: BTreeSet<String> = latest_by_pair(&store.load()?, judge.judge_id())
        .into_keys()
        .collect();
    let mut summary = BenchmarkSummary {
        total: manifest.len(),
        ..Default::default()
    };
    let mut pending = Vec::new();
    let mut seen = BTreeSet::new();
    for id in manifest {
        if !seen.insert(id.as_str()) {
            continue;
        }
        if done.contains(id) {
            summary.skipped += 1;
            continue;
        }
        match corpus.get(id) {
            Some(p) => pending.push(p),
            None => summary.failures.push(PairFailure {
                pair_id: id.clone(),
                error: JudgeError::UnknownPair(id.clone()).to_string(),
            }),
        }
    }
    if let Some(n) = opts.stop_after {
        pending.truncate(n);
    }

    let mut results = stream::iter(pending)
        .map(|pair| async move { (pair, judge.evaluate(pair, &opts.exemplars).await) })
        .buffer_unordered(opts.pair_concurrency.max(1));

    while let Some((pair, result)) = results.next().await {
        match result {
            Ok(verdict) => {
                store.append(&verdict)?;
                summary.completed += 1;
            }
            Err(e @ JudgeError::AuthError(_)) => return Err(e),
            Err(e) => {
                tracing::warn!(pair_id = %pair.pair_id, "judge failed: {e}");
                summary.failures.push(PairFailure {
                    pair_id: pair.pair_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(summary)
}
