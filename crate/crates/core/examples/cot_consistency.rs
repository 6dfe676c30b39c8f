//! Asks a text-only meta-judge whether chain-of-thought verdicts follow
//! from their own reasoning.
//!
//!     cargo run --example cot_consistency

use std::time::Duration;

use speechpref::judge::{parse_verdict, JudgeVerdict};
use speechpref::mock::{MockEndpoint, MockReply};
use speechpref::report::{consistency_check, MetaJudgeConfig};

fn verdict(pair_id: &str, text: &str) -> JudgeVerdict {
    let rollout = parse_verdict(text);
    JudgeVerdict {
        pair_id: pair_id.into(),
        judge_id: "cot-judge".into(),
        mode: "cot".into(),
        final_preference: rollout.preference,
        rollouts: vec![rollout],
        latency: Default::default(),
    }
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let verdicts = [
        verdict("p1", "Pronunciation: A is clearer. Prosody: A is more natural.\nOutput A: 8, Output B: 5"),
        verdict("p2", "B wins on every criterion.\nOutput A: 7, Output B: 3"),
        verdict("p3", "A has a clipped ending; B is cleaner.\nOutput A: 4, Output B: 7.5"),
        verdict("p4", "Hard to tell.\nOutput A: 6, Output B: 6"),
    ];

    // The stand-in meta-judge flags p2 and rambles on p4.
    let mock = MockEndpoint::start(Duration::ZERO, |req| {
        let cot = req.texts.last().map(String::as_str).unwrap_or_default();
        if cot.contains("B wins") {
            MockReply::Text(r#"{"result": 0, "reason": "The analysis favours B but A scores higher."}"#.into())
        } else if cot.contains("Hard to tell") {
            MockReply::Text("Looks fine to me.".into())
        } else {
            MockReply::Text("```json\n{\"result\": 1, \"reason\": \"Scores follow the analysis.\"}\n```".into())
        }
    })
    .await?;

    let config = MetaJudgeConfig::new(mock.url(), "meta-judge");
    let report = consistency_check(&verdicts, &config).await?;
    for r in &report.results {
        println!("{}: {} ({})", r.pair_id, r.result, r.reason);
    }
    for f in &report.failures {
        println!("{}: failed: {}", f.pair_id, f.error);
    }
    match report.rate {
        Some(rate) => println!("\nconsistency rate {:.1}% over {} verdicts", rate * 100.0, report.results.len()),
        None => println!("\nno parseable meta-judgments"),
    }
    Ok(())
}
