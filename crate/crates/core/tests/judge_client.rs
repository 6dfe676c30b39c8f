mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use speechpref::judge::{
    parse_verdict, run_benchmark, BenchmarkOptions, ChatClient, ChatMessage, Direction, Exemplar,
    GenerativeJudgeConfig, Judge, JudgeConfig, JudgeError, JudgeKind, JudgeVerdict,
    MetricJudgeConfig, PromptMode, RetryPolicy, ScoreRecord, ScoreTable, VerdictStore,
};
use speechpref::mock::{MockEndpoint, MockReply};
use speechpref::model::{BinaryPreference, JudgePreference, SpeechPair};
use speechpref::report::{consistency_check, MetaJudgeConfig, META_JUDGE_SYSTEM_PROMPT};
use speechpref::report::{AbstainPolicy, ReportError};

fn fast_retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        initial_backoff_ms: 2,
        max_backoff_ms: 10,
    }
}

fn client(url: &str, max_parallel: usize, retry: RetryPolicy, key_env: Option<&str>) -> ChatClient {
    ChatClient::new(url, "mock", 0.7, max_parallel, retry, key_env, Duration::from_secs(5)).unwrap()
}

fn generative(url: String, mode: PromptMode, k: usize, max_parallel: usize, root: &std::path::Path) -> JudgeConfig {
    JudgeConfig {
        judge_id: format!("gen-{mode}"),
        kind: JudgeKind::Generative(GenerativeJudgeConfig {
            endpoint: url,
            model: "mock".into(),
            prompt_mode: mode,
            rollouts_k: k,
            temperature: 0.7,
            max_parallel,
            retry: fast_retry(3),
            api_key_env: None,
            timeout_secs: 5,
            audio_root: Some(root.to_path_buf()),
        }),
        abstain_policy: AbstainPolicy::HalfCredit,
    }
}

fn corpus(pairs: &[SpeechPair]) -> HashMap<String, SpeechPair> {
    pairs.iter().map(|p| (p.pair_id.clone(), p.clone())).collect()
}

fn ids(pairs: &[SpeechPair]) -> Vec<String> {
    pairs.iter().map(|p| p.pair_id.clone()).collect()
}

#[tokio::test]
async fn server_errors_are_retried_then_succeed() {
    let mock = MockEndpoint::start(Duration::ZERO, |req| {
        if req.global_index < 2 {
            MockReply::Status(500)
        } else {
            MockReply::Text("Output A: 7, Output B: 3".into())
        }
    })
    .await
    .unwrap();
    let c = client(&mock.url(), 1, fast_retry(3), None);
    let done = c.complete(&[ChatMessage::text("user", "hi")]).await.unwrap();
    assert_eq!(done.retries, 2);
    assert_eq!(done.text, "Output A: 7, Output B: 3");
    assert_eq!(mock.requests(), 3);
}

#[tokio::test]
async fn retries_are_bounded() {
    let mock = MockEndpoint::start(Duration::ZERO, |_| MockReply::Status(503)).await.unwrap();
    let c = client(&mock.url(), 1, fast_retry(4), None);
    let err = c.complete(&[ChatMessage::text("user", "hi")]).await.unwrap_err();
    assert!(matches!(err, JudgeError::TransportError { attempts: 4, .. }), "{err:?}");
    assert_eq!(mock.requests(), 4);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let mock = MockEndpoint::start(Duration::ZERO, |_| MockReply::Status(400)).await.unwrap();
    let c = client(&mock.url(), 1, fast_retry(4), None);
    let err = c.complete(&[ChatMessage::text("user", "hi")]).await.unwrap_err();
    assert!(matches!(err, JudgeError::TransportError { attempts: 1, .. }), "{err:?}");
    assert_eq!(mock.requests(), 1);
}

#[tokio::test]
async fn bearer_token_comes_from_the_environment() {
    std::env::set_var("SPEECHPREF_TEST_JUDGE_KEY", "k-123");
    let seen = Arc::new(std::sync::Mutex::new(None));
    let slot = seen.clone();
    let mock = MockEndpoint::start(Duration::ZERO, move |req| {
        *slot.lock().unwrap() = req.authorization.clone();
        MockReply::Text("ok".into())
    })
    .await
    .unwrap();
    let c = client(&mock.url(), 1, fast_retry(1), Some("SPEECHPREF_TEST_JUDGE_KEY"));
    c.complete(&[ChatMessage::text("user", "hi")]).await.unwrap();
    assert_eq!(seen.lock().unwrap().as_deref(), Some("Bearer k-123"));
}

#[tokio::test]
async fn auth_failure_aborts_the_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let pairs: Vec<_> = (0..5).map(|i| common::en_pair(&format!("x{i}"))).collect();
    common::write_audio(dir.path(), &pairs);
    let mock = MockEndpoint::start(Duration::ZERO, |_| MockReply::Status(401)).await.unwrap();
    let judge = Judge::from_config(&generative(mock.url(), PromptMode::Plain, 1, 1, dir.path()), None).unwrap();
    let store = VerdictStore::open(dir.path().join("v.jsonl")).unwrap();
    let opts = BenchmarkOptions {
        pair_concurrency: 1,
        ..Default::default()
    };
    let err = run_benchmark(&judge, &ids(&pairs), &corpus(&pairs), &store, &opts).await.unwrap_err();
    assert_eq!(err, JudgeError::AuthError(401));
    // Aborted on the first pair; nothing retried.
    assert_eq!(mock.requests(), 1);
    assert!(store.load().unwrap().is_empty());
}

#[tokio::test]
async fn request_parallelism_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    let pairs: Vec<_> = (0..6).map(|i| common::en_pair(&format!("c{i}"))).collect();
    common::write_audio(dir.path(), &pairs);
    let mock = MockEndpoint::start(Duration::from_millis(20), |_| MockReply::Text("Output A: 5, Output B: 6".into()))
        .await
        .unwrap();
    let judge = Judge::from_config(&generative(mock.url(), PromptMode::Plain, 4, 3, dir.path()), None).unwrap();
    let store = VerdictStore::open(dir.path().join("v.jsonl")).unwrap();
    let s = run_benchmark(&judge, &ids(&pairs), &corpus(&pairs), &store, &BenchmarkOptions::default())
        .await
        .unwrap();
    assert_eq!(s.completed, 6);
    assert_eq!(mock.requests(), 24);
    assert!(mock.max_in_flight() <= 3, "saw {}", mock.max_in_flight());
    assert!(mock.max_in_flight() >= 2);
    for v in store.load().unwrap() {
        assert_eq!(v.rollouts.len(), 4);
        assert_eq!(v.final_preference, JudgePreference::B);
    }
}

#[tokio::test]
async fn failed_pairs_are_recorded_and_the_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let pairs: Vec<_> = (0..4).map(|i| common::en_pair(&format!("f{i}"))).collect();
    common::write_audio(dir.path(), &pairs);
    let mock = MockEndpoint::start(Duration::ZERO, |req| {
        if req.key == "f2-a" {
            MockReply::Status(500)
        } else {
            MockReply::Text("Output A: 9, Output B: 1".into())
        }
    })
    .await
    .unwrap();
    let judge = Judge::from_config(&generative(mock.url(), PromptMode::Plain, 1, 2, dir.path()), None).unwrap();
    let store = VerdictStore::open(dir.path().join("v.jsonl")).unwrap();
    let mut manifest = ids(&pairs);
    manifest.push("ghost".into());
    let s = run_benchmark(&judge, &manifest, &corpus(&pairs), &store, &BenchmarkOptions::default())
        .await
        .unwrap();
    assert_eq!(s.completed, 3);
    let failed: Vec<_> = s.failures.iter().map(|f| f.pair_id.as_str()).collect();
    assert!(failed.contains(&"f2") && failed.contains(&"ghost"), "{failed:?}");
    assert_eq!(mock.requests_for("f2-a"), 3);
}

#[tokio::test]
async fn metric_judge_compares_scores() {
    let dir = tempfile::tempdir().unwrap();
    let pairs: Vec<_> = ["m1", "m2", "m3"].iter().map(|id| common::en_pair(id)).collect();
    let mut table = ScoreTable::default();
    for (audio, v) in [("m1-a", 0.10), ("m1-b", 0.30), ("m2-a", 0.5), ("m2-b", 0.2), ("m3-a", 0.4), ("m3-b", 0.4)] {
        table.insert(ScoreRecord {
            audio_id: audio.into(),
            score_source: "wer".into(),
            value: v,
        });
    }
    let cfg = JudgeConfig {
        judge_id: "wer".into(),
        kind: JudgeKind::Metric(MetricJudgeConfig {
            direction: Direction::LowerBetter,
            score_source: "wer".into(),
        }),
        abstain_policy: AbstainPolicy::HalfCredit,
    };
    let judge = Judge::from_config(&cfg, Some(table)).unwrap();
    let store = VerdictStore::open(dir.path().join("v.jsonl")).unwrap();
    let s = run_benchmark(&judge, &ids(&pairs), &corpus(&pairs), &store, &BenchmarkOptions::default())
        .await
        .unwrap();
    assert_eq!(s.completed, 3);
    let got: HashMap<_, _> = store
        .load()
        .unwrap()
        .into_iter()
        .map(|v| (v.pair_id, v.final_preference))
        .collect();
    assert_eq!(got["m1"], JudgePreference::A);
    assert_eq!(got["m2"], JudgePreference::B);
    assert_eq!(got["m3"], JudgePreference::Abstain);
}

#[tokio::test]
async fn metric_judge_without_scores_is_a_config_error() {
    let cfg = JudgeConfig {
        judge_id: "wer".into(),
        kind: JudgeKind::Metric(MetricJudgeConfig {
            direction: Direction::LowerBetter,
            score_source: "wer".into(),
        }),
        abstain_policy: AbstainPolicy::HalfCredit,
    };
    assert!(matches!(Judge::from_config(&cfg, None), Err(JudgeError::Config(_))));
}

#[tokio::test]
async fn fewshot_sends_exemplars_before_the_query() {
    let dir = tempfile::tempdir().unwrap();
    let query = common::en_pair("q1");
    let shots: Vec<_> = (0..3).map(|i| common::en_pair(&format!("ex{i}"))).collect();
    let mut all = shots.clone();
    all.push(query.clone());
    common::write_audio(dir.path(), &all);

    let audio_seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let slot = audio_seen.clone();
    let mock = MockEndpoint::start(Duration::ZERO, move |req| {
        *slot.lock().unwrap() = req.audio_ids.clone();
        MockReply::Text("Output A: 3, Output B: 8".into())
    })
    .await
    .unwrap();
    let judge = Judge::from_config(&generative(mock.url(), PromptMode::Fewshot(3), 1, 1, dir.path()), None).unwrap();
    let exemplars: Vec<_> = shots
        .iter()
        .map(|p| Exemplar {
            pair: p.clone(),
            label: BinaryPreference::A,
        })
        .collect();
    let store = VerdictStore::open(dir.path().join("v.jsonl")).unwrap();
    let opts = BenchmarkOptions {
        exemplars,
        ..Default::default()
    };
    run_benchmark(&judge, &["q1".to_owned()], &corpus(&[query]), &store, &opts).await.unwrap();
    assert_eq!(
        *audio_seen.lock().unwrap(),
        ["ex0-a", "ex0-b", "ex1-a", "ex1-b", "ex2-a", "ex2-b", "q1-a", "q1-b"]
    );
    assert_eq!(mock.requests_for("q1-a"), 1);
    assert_eq!(store.load().unwrap()[0].mode, "fewshot:3");
}

#[tokio::test]
async fn fewshot_with_too_few_exemplars_fails_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let query = common::en_pair("q1");
    common::write_audio(dir.path(), std::slice::from_ref(&query));
    let mock = MockEndpoint::start(Duration::ZERO, |_| MockReply::Text("x".into())).await.unwrap();
    let judge = Judge::from_config(&generative(mock.url(), PromptMode::Fewshot(2), 1, 1, dir.path()), None).unwrap();
    let store = VerdictStore::open(dir.path().join("v.jsonl")).unwrap();
    let s = run_benchmark(&judge, &["q1".to_owned()], &corpus(&[query]), &store, &BenchmarkOptions::default())
        .await
        .unwrap();
    assert_eq!(s.failures.len(), 1);
    assert!(s.failures[0].error.contains("exemplars"));
    assert_eq!(mock.requests(), 0);
}

fn cot_verdict(pair_id: &str, text: &str) -> JudgeVerdict {
    let rollout = parse_verdict(text);
    JudgeVerdict {
        pair_id: pair_id.into(),
        judge_id: "gen-cot".into(),
        mode: "cot".into(),
        final_preference: rollout.preference,
        rollouts: vec![rollout],
        latency: Default::default(),
    }
}

fn meta_config(url: String) -> MetaJudgeConfig {
    let mut cfg = MetaJudgeConfig::new(url, "meta");
    cfg.retry = fast_retry(2);
    cfg
}

#[tokio::test]
async fn consistency_on_worked_example() {
    let example = include_str!("data/cot_example.txt");
    let roles = Arc::new(std::sync::Mutex::new(Vec::new()));
    let slot = roles.clone();
    let mock = MockEndpoint::start(Duration::ZERO, move |req| {
        *slot.lock().unwrap() = req.roles.clone();
        assert_eq!(req.texts[0], META_JUDGE_SYSTEM_PROMPT);
        assert_eq!(req.temperature, 0.0);
        if req.texts[1].contains("Output A: 4, Output B: 8.5") {
            MockReply::Text(
                "```json\n{\"result\": 1, \"reason\": \"B is rated better in the analysis and scores higher.\"}\n```"
                    .into(),
            )
        } else {
            MockReply::Text("{\"result\": 0, \"reason\": \"mismatch\"}".into())
        }
    })
    .await
    .unwrap();
    let verdicts = [cot_verdict("worked", example)];
    assert_eq!(verdicts[0].final_preference, JudgePreference::B);
    let report = consistency_check(&verdicts, &meta_config(mock.url())).await.unwrap();
    assert_eq!(report.results.len(), 1);
    assert_eq!(report.results[0].result, 1);
    assert_eq!(report.rate, Some(1.0));
    assert_eq!(*roles.lock().unwrap(), ["system", "user"]);
}

#[tokio::test]
async fn consistency_rate_excludes_unparseable_pairs() {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let mock = MockEndpoint::start(Duration::ZERO, move |req| {
        let cot = &req.texts[1];
        if cot.contains("pair-ok") {
            MockReply::Text(r#"{"result": 1, "reason": "fine"}"#.into())
        } else if cot.contains("pair-bad") {
            MockReply::Text(r#"{"result": 0, "reason": "scores contradict the analysis"}"#.into())
        } else {
            counter.fetch_add(1, Ordering::SeqCst);
            MockReply::Text("I think it is consistent.".into())
        }
    })
    .await
    .unwrap();
    let verdicts = [
        cot_verdict("a", "pair-ok. Output A: 8, Output B: 3"),
        cot_verdict("b", "pair-bad. Output A: 2, Output B: 9"),
        cot_verdict("c", "pair-junk. Output A: 5, Output B: 4"),
    ];
    let report = consistency_check(&verdicts, &meta_config(mock.url())).await.unwrap();
    assert_eq!(report.rate, Some(0.5));
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].pair_id, "c");
    assert_eq!(calls.load(Ordering::SeqCst), 3);
    let lines = report.to_jsonl();
    assert_eq!(lines.lines().count(), 3);
}

#[tokio::test]
async fn consistency_auth_failure_aborts() {
    let mock = MockEndpoint::start(Duration::ZERO, |_| MockReply::Status(403)).await.unwrap();
    let verdicts = [cot_verdict("a", "Output A: 8, Output B: 3")];
    let err = consistency_check(&verdicts, &meta_config(mock.url())).await.unwrap_err();
    assert!(matches!(err, ReportError::Judge(JudgeError::AuthError(403))), "{err:?}");
}

#[tokio::test]
async fn consistency_with_no_results_has_no_rate() {
    let mock = MockEndpoint::start(Duration::ZERO, |_| MockReply::Text("nope".into())).await.unwrap();
    let report = consistency_check(&[], &meta_config(mock.url())).await.unwrap();
    assert_eq!(report.rate, None);
    assert!(report.results.is_empty());
}
