//! voting@k with a chat-completion judge. A local mock endpoint stands in
//! for the model and answers from a fixed script.
//!
//!     cargo run --example generative_judge_voting

mod common;

use std::collections::HashMap;
use std::time::Duration;

use speechpref::judge::{
    run_benchmark, BenchmarkOptions, GenerativeJudgeConfig, Judge, JudgeConfig, JudgeKind, PromptMode,
    RetryPolicy, VerdictStore,
};
use speechpref::mock::{MockEndpoint, MockReply};
use speechpref::model::{BinaryPreference, LangSetting, Subset};
use speechpref::report::{accuracy, AbstainPolicy};

const REPLIES: [&str; 5] = [
    "A sounds smoother. Output A: 8, Output B: 5",
    "B has odd stress on the second word. Output A: 7, Output B: 4",
    "Output A: 4, Output B: 6",
    "Both are similar. Output A: 6, Output B: 6",
    "Sorry, I cannot hear the audio.",
];

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let pairs: Vec<_> = (0..12)
        .map(|i| common::pair(&format!("p{i:02}"), Subset::Regular, LangSetting::En2en, (0.02, 0.03)))
        .collect();
    common::write_audio(dir.path(), &pairs);

    // Replies rotate per pair, offset by the pair index, with a 503 now and then.
    let mock = MockEndpoint::start(Duration::from_millis(5), |req| {
        if req.global_index % 17 == 5 {
            return MockReply::Status(503);
        }
        let n: usize = req.key[1..3].parse().unwrap_or(0);
        MockReply::Text(REPLIES[(n + req.key_index) % REPLIES.len()].into())
    })
    .await?;

    for k in [1, 5, 9] {
        let config = JudgeConfig {
            judge_id: format!("mock-k{k}"),
            kind: JudgeKind::Generative(GenerativeJudgeConfig {
                endpoint: mock.url(),
                model: "mock-audio-llm".into(),
                prompt_mode: PromptMode::Plain,
                rollouts_k: k,
                temperature: 0.7,
                max_parallel: 4,
                retry: RetryPolicy { max_attempts: 4, initial_backoff_ms: 10, max_backoff_ms: 100 },
                api_key_env: None,
                timeout_secs: 30,
                audio_root: Some(dir.path().to_path_buf()),
            }),
            abstain_policy: AbstainPolicy::HalfCredit,
        };
        let judge = Judge::from_config(&config, None)?;
        let store = VerdictStore::open(dir.path().join(format!("{}.jsonl", config.judge_id)))?;
        let manifest: Vec<String> = pairs.iter().map(|p| p.pair_id.clone()).collect();
        let corpus: HashMap<_, _> = pairs.iter().map(|p| (p.pair_id.clone(), p.clone())).collect();
        let summary = run_benchmark(&judge, &manifest, &corpus, &store, &BenchmarkOptions::default()).await?;

        let verdicts = store.load()?;
        let labels: HashMap<_, _> = pairs.iter().map(|p| (p.pair_id.clone(), BinaryPreference::A)).collect();
        let acc = accuracy(&verdicts, &labels, AbstainPolicy::HalfCredit)?;
        let retries: u32 = verdicts.iter().map(|v| v.retries()).sum();
        println!(
            "k={k}: {} verdicts, accuracy {:.1}%, abstentions {}, retries {retries}, failures {}",
            verdicts.len(),
            acc.accuracy * 100.0,
            acc.abstentions,
            summary.failures.len()
        );
        if k == 5 {
            let v = &verdicts[0];
            let votes: Vec<String> = v.rollouts.iter().map(|r| format!("{:?}", r.preference)).collect();
            println!("  {} votes {votes:?} -> {:?}", v.pair_id, v.final_preference);
        }
    }
    println!("\nrequests served by mock: {}, peak concurrency {}", mock.requests(), mock.max_in_flight());
    Ok(())
}
