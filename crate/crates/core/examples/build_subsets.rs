//! Curates pref/hq subsets from aggregated labels and draws stratified
//! eval and dev splits, then splits train by teacher agreement.
//!
//!     cargo run --example build_subsets

mod common;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechpref::model::{AgreementLevel, AggregatedLabel, BinaryPreference, ConsensusLabel, Lang, LangSetting, Subset};
use speechpref::pipeline::{
    curate, split_sft_rl, AggregatedPair, CurateOptions, DatasetSubsetSpec, MissingWerPolicy, SubsetCell,
    TeacherInput, DEFAULT_WER_GAP_THRESHOLD,
};

fn spec(count: usize, seed: u64) -> DatasetSubsetSpec {
    let cells = [(Subset::Regular, Lang::En), (Subset::Regular, Lang::Zh), (Subset::Expressive, Lang::Mixed)]
        .into_iter()
        .map(|(subset, target_lang)| SubsetCell { subset, target_lang, count })
        .collect();
    DatasetSubsetSpec { cells, seed, agreement_filter: [AgreementLevel::FA].into() }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let settings = [
        (Subset::Regular, LangSetting::En2en),
        (Subset::Regular, LangSetting::En2zh),
        (Subset::Expressive, LangSetting::Zh2mixed),
    ];
    let labels = [ConsensusLabel::A, ConsensusLabel::B, ConsensusLabel::Tie, ConsensusLabel::Undecided];
    let levels = [AgreementLevel::FA, AgreementLevel::FA, AgreementLevel::WA, AgreementLevel::WD, AgreementLevel::FD];

    let mut corpus = Vec::new();
    for i in 0..1200 {
        let (subset, setting) = settings[i % settings.len()];
        let id = format!("p{i:04}");
        let wer = (rng.random_range(0.0..0.2), rng.random_range(0.0..0.2));
        corpus.push(AggregatedPair {
            pair: common::pair(&id, subset, setting, wer),
            aggregate: AggregatedLabel {
                pair_id: id,
                label: labels[rng.random_range(0..labels.len())],
                agreement: levels[rng.random_range(0..levels.len())],
                n_annotations: 2,
            },
        });
    }

    let opts = CurateOptions {
        eval_spec: spec(40, 100),
        dev_spec: spec(10, 101),
        wer_gap_threshold: DEFAULT_WER_GAP_THRESHOLD,
        missing_wer: MissingWerPolicy::Drop,
    };
    let curated = curate(&corpus, &opts)?;
    println!("input digest {}", curated.input_digest);
    for m in curated.manifests(&opts) {
        println!("{:<6} {:>5}  {:?}", m.header.subset, m.header.total, m.header.counts);
    }

    // Running it again gives the same eval manifest.
    let again = curate(&corpus, &opts)?;
    assert_eq!(again.manifests(&opts)[2], curated.manifests(&opts)[2]);

    // A teacher that agrees with the human label two times in three.
    let teacher: HashMap<String, TeacherInput> = curated
        .splits
        .train
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (a, b) = if (i % 3 == 0) == (p.label == BinaryPreference::A) { (3, 8) } else { (8, 3) };
            let rec = TeacherInput {
                pair_id: p.pair_id().to_owned(),
                teacher_output: format!("Reasoning... Output A: {a}, Output B: {b}"),
                teacher_pref: None,
            };
            (rec.pair_id.clone(), rec)
        })
        .collect();
    let split = split_sft_rl(&curated.splits.train, &teacher)?;
    println!("\ntrain {} -> sft {}, rl {}", curated.splits.train.len(), split.sft.len(), split.rl.len());
    Ok(())
}
