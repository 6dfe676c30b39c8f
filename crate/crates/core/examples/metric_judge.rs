//! Scores a metric judge (lower WER wins) against human labels and prints
//! a faceted accuracy table.
//!
//!     cargo run --example metric_judge

mod common;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechpref::judge::{
    run_benchmark, BenchmarkOptions, Direction, Judge, JudgeConfig, JudgeKind, MetricJudgeConfig, ScoreRecord,
    ScoreTable, VerdictStore,
};
use speechpref::model::{BinaryPreference, LangSetting, Subset};
use speechpref::report::{emit_report, facet_breakdown, AbstainPolicy, Facet, ReportFormat};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let settings = [LangSetting::En2en, LangSetting::Zh2zh, LangSetting::En2zh, LangSetting::Zh2en];
    let mut pairs = Vec::new();
    let mut labels = HashMap::new();
    let mut scores = ScoreTable::default();
    for i in 0..400 {
        let setting = settings[i % settings.len()];
        let subset = if i % 2 == 0 { Subset::Regular } else { Subset::Expressive };
        // Coarse WER so that some pairs tie exactly.
        let wer = (rng.random_range(0..6) as f64 / 20.0, rng.random_range(0..6) as f64 / 20.0);
        let p = common::pair(&format!("p{i:03}"), subset, setting, wer);
        // Humans follow WER only loosely.
        let human_a = if rng.random_bool(0.6) { wer.0 <= wer.1 } else { rng.random_bool(0.5) };
        labels.insert(p.pair_id.clone(), if human_a { BinaryPreference::A } else { BinaryPreference::B });
        for a in [&p.audio_a, &p.audio_b] {
            scores.insert(ScoreRecord { audio_id: a.audio_id.clone(), score_source: "wer".into(), value: a.wer.unwrap() });
        }
        pairs.push(p);
    }

    let config = JudgeConfig {
        judge_id: "wer-lower".into(),
        kind: JudgeKind::Metric(MetricJudgeConfig { direction: Direction::LowerBetter, score_source: "wer".into() }),
        abstain_policy: AbstainPolicy::HalfCredit,
    };
    let judge = Judge::from_config(&config, Some(scores))?;
    let store = VerdictStore::open(dir.path().join("verdicts.jsonl"))?;
    let manifest: Vec<String> = pairs.iter().map(|p| p.pair_id.clone()).collect();
    let corpus: HashMap<_, _> = pairs.iter().map(|p| (p.pair_id.clone(), p.clone())).collect();
    let summary = run_benchmark(&judge, &manifest, &corpus, &store, &BenchmarkOptions::default()).await?;
    println!("judged {} pairs\n", summary.completed);

    let verdicts = store.load()?;
    let meta: HashMap<_, _> = pairs.iter().map(|p| (p.pair_id.clone(), p.meta.clone())).collect();
    let report = facet_breakdown(&verdicts, &labels, &meta, &[Facet::Subset, Facet::LangSetting], AbstainPolicy::HalfCredit)?;
    print!("{}", emit_report(&report, ReportFormat::MarkdownTable));
    Ok(())
}
