//! Three annotators work through a small queue; disagreements get a third
//! opinion, then every pair is aggregated.
//!
//!     cargo run --example annotate_workflow

mod common;

use std::collections::BTreeSet;

use speechpref::analytics::aggregate_label;
use speechpref::annotation::{AnnotationStore, AnnotatorProfile, ServiceConfig, Submission, TaskKind};
use speechpref::model::{CmosScore, Lang, LangSetting, Subset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // No storage path: everything stays in memory.
    let store = AnnotationStore::open(ServiceConfig::default())?;

    let pairs: Vec<_> = (0..6)
        .map(|i| common::pair(&format!("p{i}"), Subset::Regular, LangSetting::En2en, (0.03, 0.05)))
        .collect();
    let report = store.ingest_pairs(&common::jsonl(&pairs))?;
    println!("ingested {} pairs", report.accepted);

    for who in ["ana", "ben", "cleo"] {
        store.register_annotator(AnnotatorProfile {
            annotator_id: who.into(),
            qualified_langs: BTreeSet::from([Lang::En]),
            active: true,
        })?;
    }

    // Each annotator has a fixed taste so that some pairs disagree.
    let opinion = |who: &str, pair: &str| {
        let n = pair[1..].parse::<usize>().unwrap();
        match (who, n % 3) {
            ("ana", _) => CmosScore::A1,
            ("ben", 0) => CmosScore::B2,
            ("ben", _) => CmosScore::A2,
            _ => CmosScore::Tie,
        }
    };

    loop {
        let mut worked = false;
        for who in ["ana", "ben", "cleo"] {
            let Some(task) = store.next_task(who)? else { continue };
            let status = store.submit_annotation(Submission {
                pair_id: task.pair_id.clone(),
                annotator_id: who.into(),
                cmos: opinion(who, &task.pair_id),
                intelligible_a: true,
                intelligible_b: true,
            })?;
            let tag = if task.kind == TaskKind::TieBreak { " (tie-break)" } else { "" };
            println!("{who:>4} -> {}{tag}: {status:?}", task.pair_id);
            worked = true;
        }
        if !worked {
            break;
        }
    }

    let progress = store.progress_stats()?;
    println!("\n{}", serde_json::to_string_pretty(&progress)?);

    println!("\npair  label      agreement  n");
    for p in &pairs {
        let snap = store.pair_state(&p.pair_id)?;
        let agg = aggregate_label(&snap.annotations)?;
        println!("{:<5} {:<10} {:<10} {}", agg.pair_id, format!("{:?}", agg.label), format!("{:?}", agg.agreement), agg.n_annotations);
    }
    Ok(())
}
