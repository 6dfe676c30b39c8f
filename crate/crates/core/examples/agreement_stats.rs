//! Agreement, reliability and the WER/intelligibility curve over a
//! synthetic annotation table.
//!
//!     cargo run --example agreement_stats

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechpref::analytics::{
    all_reliabilities, audio_intelligibility, inter_annotator_agreement, wer_accuracy_curve,
    BootstrapConfig, LabelSpace, Reliability, TieExclusion,
};
use speechpref::model::{group_by_pair, CmosScore, LangSetting, Subset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let annotators = ["r1", "r2", "r3", "r4", "r5"];

    let mut pairs = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..300 {
        let id = format!("p{i:03}");
        let wer = (rng.random_range(0.0..0.4), rng.random_range(0.0..0.4));
        pairs.push(common::pair(&id, Subset::Regular, LangSetting::En2en, wer));
        // A latent preference; r5 is noisier than the rest.
        let truth = rng.random_range(0..5usize);
        let first = rng.random_range(0..annotators.len());
        for k in 0..2 {
            let who = annotators[(first + k) % annotators.len()];
            let noise = if who == "r5" { 0.6 } else { 0.2 };
            let idx = if rng.random_bool(noise) { rng.random_range(0..5) } else { truth };
            let mut a = common::annotation(&id, who, CmosScore::ALL[idx]);
            // Listeners miss words more often as WER grows.
            a.intelligible_a = rng.random_bool(1.0 - wer.0);
            a.intelligible_b = rng.random_bool(1.0 - wer.1);
            annotations.push(a);
        }
    }
    let grouped = group_by_pair(annotations.iter());

    let boot = BootstrapConfig { n_resamples: 500, seed: 7 };
    for (space, ties) in [
        (LabelSpace::Ternary, TieExclusion::PerAnnotation),
        (LabelSpace::Binary, TieExclusion::PerAnnotation),
        (LabelSpace::Binary, TieExclusion::PerPair),
    ] {
        let r = inter_annotator_agreement(&grouped, space, ties, boot)?;
        println!(
            "{space:?}/{ties:?}: {:.3} +/- {:.3} over {} pairs",
            r.mean,
            r.std,
            r.n_pairs
        );
    }

    println!("\nreliability (min 10 samples)");
    for r in all_reliabilities(&grouped, 10) {
        match r {
            Reliability::Scored(s) => println!("  {} {:.3} (n={})", s.annotator_id, s.r_mean, s.n_samples),
            Reliability::NotEnoughData { annotator_id, n_samples } => {
                println!("  {annotator_id} not enough data (n={n_samples})")
            }
        }
    }

    println!("\nWER bin       accuracy  audios");
    let records = audio_intelligibility(&pairs, &grouped);
    for bin in wer_accuracy_curve(&records, &[0.0, 0.1, 0.2, 0.3, 0.4])? {
        let acc = bin.mean_accuracy.map_or("-".into(), |a| format!("{a:.3}"));
        println!("[{:.1}, {:.1})   {acc:>8}  {}", bin.wer_lo, bin.wer_hi, bin.n_audios);
    }
    Ok(())
}
