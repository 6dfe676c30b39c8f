//! Statistics over completed annotations.
//!
//! Everything here is a pure function of its inputs. Randomness (bootstrap)
//! is driven by an explicit seed.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AgreementLevel, AggregatedLabel, Annotation, ConsensusLabel, PairAnnotations, SpeechPair,
    TernaryLabel,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("need 2 or 3 annotations, got {0}")]
    TooFewAnnotations(usize),
    #[error("annotator `{0}` appears more than once")]
    DuplicateAnnotator(String),
    #[error("annotations belong to different pairs")]
    MixedPairs,
    #[error("agreement is defined on 2 or 3 labels, got {0}")]
    BadSize(usize),
    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),
    #[error("no pairs to analyze")]
    EmptyInput,
    #[error("bin edges must be strictly ascending with at least two edges")]
    UnsortedBinEdges,
    #[error("audio `{0}` has no WER")]
    MissingWer(String),
    #[error("audio `{0}` has no intelligibility votes")]
    NoVotes(String),
}

/// Agreement level of a multiset of ternary labels.
///
/// All identical is FA (including all-Tie). Two distinct values where one is
/// Tie is WA; `{A, B}` is WD; three distinct values is FD.
pub fn classify_agreement(labels: &[TernaryLabel]) -> Result<AgreementLevel, AnalyticsError> {
    if !(2..=3).contains(&labels.len()) {
        return Err(AnalyticsError::BadSize(labels.len()));
    }
    let distinct: BTreeSet<TernaryLabel> = labels.iter().copied().collect();
    Ok(match distinct.len() {
        1 => AgreementLevel::FA,
        2 if distinct.contains(&TernaryLabel::Tie) => AgreementLevel::WA,
        2 => AgreementLevel::WD,
        _ => AgreementLevel::FD,
    })
}

/// Ternary value held by a strict majority, if any.
pub fn strict_majority(labels: &[TernaryLabel]) -> Option<TernaryLabel> {
    let mut counts: BTreeMap<TernaryLabel, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .find(|&(_, n)| 2 * n > labels.len())
        .map(|(l, _)| l)
}

/// Majority label and agreement level for one pair's annotations.
pub fn aggregate_label(annotations: &[Annotation]) -> Result<AggregatedLabel, AnalyticsError> {
    let n = annotations.len();
    if !(2..=3).contains(&n) {
        return Err(AnalyticsError::TooFewAnnotations(n));
    }
    let pair_id = &annotations[0].pair_id;
    if annotations.iter().any(|a| &a.pair_id != pair_id) {
        return Err(AnalyticsError::MixedPairs);
    }
    let mut seen = HashSet::new();
    for a in annotations {
        if !seen.insert(a.annotator_id.as_str()) {
            return Err(AnalyticsError::DuplicateAnnotator(a.annotator_id.clone()));
        }
    }
    let labels: Vec<TernaryLabel> = annotations.iter().map(Annotation::ternary).collect();
    let agreement = classify_agreement(&labels)?;
    let label = strict_majority(&labels).map_or(ConsensusLabel::Undecided, ConsensusLabel::from);
    Ok(AggregatedLabel {
        pair_id: pair_id.clone(),
        label,
        agreement,
        n_annotations: n as u32,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityScore {
    pub annotator_id: String,
    /// Mean over the annotator's samples of the fraction of peers giving the same label.
    pub r_mean: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Reliability {
    Scored(ReliabilityScore),
    NotEnoughData { annotator_id: String, n_samples: usize },
}

pub const DEFAULT_MIN_SAMPLES: usize = 10;

/// Per-annotator peer agreement rate.
///
/// Labels are compared in ternary space with Tie as its own category.
/// Samples where the annotator has no peer are not counted.
pub fn annotator_reliability(
    annotator_id: &str,
    pairs: &[PairAnnotations],
    min_samples: usize,
) -> Result<Reliability, AnalyticsError> {
    let mut known = false;
    let mut sum = 0.0;
    let mut n_samples = 0usize;
    for pair in pairs {
        let Some(own) = pair.annotations.iter().find(|a| a.annotator_id == annotator_id) else {
            continue;
        };
        known = true;
        let own = own.ternary();
        let peers: Vec<TernaryLabel> = pair
            .annotations
            .iter()
            .filter(|a| a.annotator_id != annotator_id)
            .map(Annotation::ternary)
            .collect();
        if peers.is_empty() {
            continue;
        }
        let matches = peers.iter().filter(|&&p| p == own).count();
        sum += matches as f64 / peers.len() as f64;
        n_samples += 1;
    }
    if !known {
        return Err(AnalyticsError::UnknownAnnotator(annotator_id.to_owned()));
    }
    if n_samples < min_samples || n_samples == 0 {
        return Ok(Reliability::NotEnoughData {
            annotator_id: annotator_id.to_owned(),
            n_samples,
        });
    }
    Ok(Reliability::Scored(ReliabilityScore {
        annotator_id: annotator_id.to_owned(),
        r_mean: sum / n_samples as f64,
        n_samples,
    }))
}

/// Reliability of every annotator present in `pairs`, ordered by annotator id.
pub fn all_reliabilities(pairs: &[PairAnnotations], min_samples: usize) -> Vec<Reliability> {
    let annotators: BTreeSet<&str> = pairs
        .iter()
        .flat_map(|p| p.annotations.iter().map(|a| a.annotator_id.as_str()))
        .collect();
    annotators
        .into_iter()
        .map(|id| annotator_reliability(id, pairs, min_samples).expect("annotator is present"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    #[default]
    Ternary,
    Binary,
}

/// How Tie votes are removed in binary label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieExclusion {
    /// Drop only the Tie votes; keep the pair if two or more votes remain.
    #[default]
    PerAnnotation,
    /// Drop every pair containing a Tie vote.
    PerPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub mean: f64,
    /// Standard deviation of the mean across bootstrap resamples of pairs.
    pub std: f64,
    pub n_pairs: usize,
    pub label_space: LabelSpace,
}

/// Fraction of agreeing unordered annotator pairs.
fn pairwise_agreement(labels: &[TernaryLabel]) -> f64 {
    let n = labels.len();
    let mut agree = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                agree += 1;
            }
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}

/// Per-pair agreement values after label-space filtering, in input order.
pub fn per_pair_agreement(
    pairs: &[PairAnnotations],
    space: LabelSpace,
    ties: TieExclusion,
) -> Vec<f64> {
    pairs
        .iter()
        .filter_map(|p| {
            let mut labels: Vec<TernaryLabel> = p.annotations.iter().map(Annotation::ternary).collect();
            if space == LabelSpace::Binary {
                if ties == TieExclusion::PerPair && labels.contains(&TernaryLabel::Tie) {
                    return None;
                }
                labels.retain(|&l| l != TernaryLabel::Tie);
            }
            (labels.len() >= 2).then(|| pairwise_agreement(&labels))
        })
        .collect()
}

/// Probability that two randomly chosen annotators of a pair give the same label.
pub fn inter_annotator_agreement(
    pairs: &[PairAnnotations],
    space: LabelSpace,
    ties: TieExclusion,
    bootstrap: BootstrapConfig,
) -> Result<AgreementReport, AnalyticsError> {
    let values = per_pair_agreement(pairs, space, ties);
    if values.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;

    let std = if bootstrap.n_resamples < 2 {
        0.0
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(bootstrap.seed);
        let means: Vec<f64> = (0..bootstrap.n_resamples)
            .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
            .collect();
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
        var.sqrt()
    };

    Ok(AgreementReport {
        mean,
        std,
        n_pairs: n,
        label_space: space,
    })
}

/// One audio's WER and the intelligibility votes it received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioIntelligibility {
    pub audio_id: String,
    pub wer: Option<f64>,
    pub votes: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerAccuracyBin {
    pub wer_lo: f64,
    pub wer_hi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
    pub n_audios: usize,
}

/// Collects per-audio intelligibility votes from annotated pairs.
///
/// An audio appearing in several pairs pools all of its votes.
pub fn audio_intelligibility(
    pairs: &[SpeechPair],
    annotations: &[PairAnnotations],
) -> Vec<AudioIntelligibility> {
    let by_pair: BTreeMap<&str, &PairAnnotations> =
        annotations.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let mut out: BTreeMap<String, AudioIntelligibility> = BTreeMap::new();
    for pair in pairs {
        let Some(group) = by_pair.get(pair.pair_id.as_str()) else {
            continue;
        };
        for (audio, pick) in [
            (&pair.audio_a, (|a: &Annotation| a.intelligible_a) as fn(&Annotation) -> bool),
            (&pair.audio_b, |a: &Annotation| a.intelligible_b),
        ] {
            let entry = out
                .entry(audio.audio_id.clone())
                .or_insert_with(|| AudioIntelligibility {
                    audio_id: audio.audio_id.clone(),
                    wer: audio.wer,
                    votes: Vec::new(),
                });
            entry.votes.extend(group.annotations.iter().map(pick));
        }
    }
    out.into_values().collect()
}

/// Mean human intelligibility accuracy per WER bin.
///
/// Bins are `[lo, hi)` except the last, which is closed. Audios outside the
/// edges are not counted.
pub fn wer_accuracy_curve(
    records: &[AudioIntelligibility],
    bin_edges: &[f64],
) -> Result<Vec<WerAccuracyBin>, AnalyticsError> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(AnalyticsError::UnsortedBinEdges);
    }
    let n_bins = bin_edges.len() - 1;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for r in records {
        let wer = r.wer.ok_or_else(|| AnalyticsError::MissingWer(r.audio_id.clone()))?;
        if r.votes.is_empty() {
            return Err(AnalyticsError::NoVotes(r.audio_id.clone()));
        }
        let last = bin_edges[n_bins];
        let bin = if wer == last {
            Some(n_bins - 1)
        } else {
            bin_edges.windows(2).position(|w| w[0] <= wer && wer < w[1])
        };
        if let Some(b) = bin {
            let acc = r.votes.iter().filter(|&&v| v).count() as f64 / r.votes.len() as f64;
            sums[b] += acc;
            counts[b] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| WerAccuracyBin {
            wer_lo: bin_edges[b],
            wer_hi: bin_edges[b + 1],
            mean_accuracy: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
            n_audios: counts[b],
        })
        .collect())
}
