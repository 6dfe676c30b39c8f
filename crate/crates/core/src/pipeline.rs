//! Dataset curation: raw → pref → hq → {eval, dev, train}, and the SFT/RL
//! split of the training set by teacher-judge agreement.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::judge::{parse_verdict, render_prompt, PromptDocument, PromptMode};
use crate::model::{
    AgreementLevel, AggregatedLabel, BinaryPreference, JudgePreference, Lang, SpeechPair, Subset,
};

pub const DEFAULT_WER_GAP_THRESHOLD: f64 = 0.12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("pair `{0}` has no WER for one of its clips")]
    MissingWer(String),
    #[error("cell {cell} needs {requested} pairs but only {available} qualify (short by {shortfall})")]
    InsufficientCell {
        cell: CellKey,
        requested: usize,
        available: usize,
        shortfall: usize,
    },
    #[error("no teacher record for pair `{0}`")]
    MissingTeacherRecord(String),
    #[error("invalid subset spec: {0}")]
    InvalidSpec(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("cannot render prompt for `{pair_id}`: {message}")]
    Prompt { pair_id: String, message: String },
}

/// A pair with its aggregated human label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedPair {
    pub pair: SpeechPair,
    pub aggregate: AggregatedLabel,
}

/// A pair admitted to a preference subset: its label is always A or B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub pair: SpeechPair,
    pub label: BinaryPreference,
    pub agreement: AgreementLevel,
    pub n_annotations: u32,
}

impl LabeledPair {
    pub fn pair_id(&self) -> &str {
        &self.pair.pair_id
    }

    pub fn cell(&self) -> CellKey {
        CellKey {
            subset: self.pair.meta.subset,
            target_lang: self.pair.meta.target_lang,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub subset: Subset,
    pub target_lang: Lang,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = |v: serde_json::Value| v.as_str().unwrap_or("?").to_owned();
        write!(
            f,
            "{}/{}",
            name(serde_json::to_value(self.subset).unwrap_or_default()),
            name(serde_json::to_value(self.target_lang).unwrap_or_default())
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetCell {
    pub subset: Subset,
    pub target_lang: Lang,
    pub count: usize,
}

impl SubsetCell {
    pub fn key(&self) -> CellKey {
        CellKey {
            subset: self.subset,
            target_lang: self.target_lang,
        }
    }
}

fn default_agreement_filter() -> BTreeSet<AgreementLevel> {
    BTreeSet::from([AgreementLevel::FA])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSubsetSpec {
    pub cells: Vec<SubsetCell>,
    pub seed: u64,
    #[serde(default = "default_agreement_filter")]
    pub agreement_filter: BTreeSet<AgreementLevel>,
}

impl DatasetSubsetSpec {
    /// Five cells of 200: regular en/zh and expressive en/zh/mixed.
    pub fn benchmark_layout(seed: u64) -> DatasetSubsetSpec {
        let cells = [
            (Subset::Regular, Lang::En),
            (Subset::Regular, Lang::Zh),
            (Subset::Expressive, Lang::En),
            (Subset::Expressive, Lang::Zh),
            (Subset::Expressive, Lang::Mixed),
        ]
        .into_iter()
        .map(|(subset, target_lang)| SubsetCell {
            subset,
            target_lang,
            count: 200,
        })
        .collect();
        DatasetSubsetSpec {
            cells,
            seed,
            agreement_filter: default_agreement_filter(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut seen = HashSet::new();
        for c in &self.cells {
            if c.count == 0 {
                return Err(PipelineError::InvalidSpec(format!("cell {} has count 0", c.key())));
            }
            if !seen.insert(c.key()) {
                return Err(PipelineError::InvalidSpec(format!("cell {} listed twice", c.key())));
            }
        }
        if self.agreement_filter.is_empty() {
            return Err(PipelineError::InvalidSpec("agreement_filter is empty".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }
}

/// Keeps pairs with a decided A/B label outside full disagreement.
pub fn build_pref(pairs: &[AggregatedPair]) -> Vec<LabeledPair> {
    pairs
        .iter()
        .filter(|p| p.aggregate.agreement != AgreementLevel::FD)
        .filter_map(|p| {
            Some(LabeledPair {
                pair: p.pair.clone(),
                label: p.aggregate.label.to_binary()?,
                agreement: p.aggregate.agreement,
                n_annotations: p.aggregate.n_annotations,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingWerPolicy {
    #[default]
    Drop,
    Error,
}

/// Keeps pairs whose WER gap is strictly below `threshold`.
pub fn build_hq(
    pref: &[LabeledPair],
    threshold: f64,
    missing: MissingWerPolicy,
) -> Result<Vec<LabeledPair>, PipelineError> {
    let mut out = Vec::new();
    for p in pref {
        match p.pair.wer_gap() {
            Some(gap) if gap < threshold => out.push(p.clone()),
            Some(_) => {}
            None => match missing {
                MissingWerPolicy::Drop => {
                    tracing::warn!(pair_id = %p.pair_id(), "dropping pair without WER");
                }
                MissingWerPolicy::Error => return Err(PipelineError::MissingWer(p.pair.pair_id.clone())),
            },
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub eval: Vec<LabeledPair>,
    pub dev: Vec<LabeledPair>,
    pub train: Vec<LabeledPair>,
}

fn draw(
    hq: &[LabeledPair],
    taken: &HashSet<usize>,
    spec: &DatasetSubsetSpec,
) -> Result<Vec<usize>, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = Vec::with_capacity(spec.total());
    for cell in &spec.cells {
        let key = cell.key();
        let candidates: Vec<usize> = hq
            .iter()
            .enumerate()
            .filter(|(i, p)| {
                !taken.contains(i) && p.cell() == key && spec.agreement_filter.contains(&p.agreement)
            })
            .map(|(i, _)| i)
            .collect();
        if candidates.len() < cell.count {
            return Err(PipelineError::InsufficientCell {
                cell: key,
                requested: cell.count,
                available: candidates.len(),
                shortfall: cell.count - candidates.len(),
            });
        }
        let picks = rand::seq::index::sample(&mut rng, candidates.len(), cell.count);
        chosen.extend(picks.into_iter().map(|k| candidates[k]));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Draws eval, then dev from what remains; train is everything else.
/// Each split keeps the order of `hq`.
pub fn stratified_sample(
    hq: &[LabeledPair],
    eval_spec: &DatasetSubsetSpec,
    dev_spec: &DatasetSubsetSpec,
) -> Result<Splits, PipelineError> {
    let eval_idx = draw(hq, &HashSet::new(), eval_spec)?;
    let mut taken: HashSet<usize> = eval_idx.iter().copied().collect();
    let dev_idx = draw(hq, &taken, dev_spec)?;
    taken.extend(dev_idx.iter().copied());
    let pick = |idx: &[usize]| idx.iter().map(|&i| hq[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        eval: pick(&eval_idx),
        dev: pick(&dev_idx),
        train: hq
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken.contains(i))
            .map(|(_, p)| p.clone())
            .collect(),
    })
}

/// A teacher judge's CoT answer for one training pair, as ingested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherInput {
    pub pair_id: String,
    pub teacher_output: String,
    /// Parsed from `teacher_output` when absent.
    #[serde(default)]
    pub teacher_pref: Option<JudgePreference>,
}

impl TeacherInput {
    pub fn preference(&self) -> JudgePreference {
        self.teacher_pref
            .unwrap_or_else(|| parse_verdict(&self.teacher_output).preference)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub pair_id: String,
    pub prompt_document: PromptDocument,
    pub teacher_output: String,
    pub teacher_pref: JudgePreference,
}

/// A training prompt left for reinforcement learning; no target output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlPrompt {
    pub pair_id: String,
    pub prompt_document: PromptDocument,
    pub human_label: BinaryPreference,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SftRlSplit {
    pub sft: Vec<TeacherRecord>,
    pub rl: Vec<RlPrompt>,
}

/// Teacher agrees with the human label → SFT sample; otherwise the prompt
/// goes to the RL pool.
pub fn split_sft_rl(
    train: &[LabeledPair],
    teacher: &HashMap<String, TeacherInput>,
) -> Result<SftRlSplit, PipelineError> {
    let mut out = SftRlSplit::default();
    for p in train {
        let id = p.pair_id();
        let t = teacher
            .get(id)
            .ok_or_else(|| PipelineError::MissingTeacherRecord(id.to_owned()))?;
        let prompt_document =
            render_prompt(PromptMode::Cot, &p.pair, &[]).map_err(|e| PipelineError::Prompt {
                pair_id: id.to_owned(),
                message: e.to_string(),
            })?;
        let pref = t.preference();
        if pref.binary() == Some(p.label) {
            out.sft.push(TeacherRecord {
                pair_id: id.to_owned(),
                prompt_document,
                teacher_output: t.teacher_output.clone(),
                teacher_pref: pref,
            });
        } else {
            out.rl.push(RlPrompt {
                pair_id: id.to_owned(),
                prompt_document,
                human_label: p.label,
            });
        }
    }
    Ok(out)
}

/// Hex SHA-256 over the canonical JSON lines of the input pairs.
pub fn input_digest(pairs: &[AggregatedPair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(serde_json::to_vec(p).expect("serializable"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub subset: String,
    #[serde(default)]
    pub spec: Option<DatasetSubsetSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Pair count per `subset/target_lang` cell.
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
    pub input_digest: String,
}

/// Header line followed by one pair id per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub pair_ids: Vec<String>,
}

impl Manifest {
    pub fn new(
        subset: &str,
        spec: Option<&DatasetSubsetSpec>,
        pairs: &[LabeledPair],
        input_digest: &str,
    ) -> Manifest {
        let mut counts = BTreeMap::new();
        for p in pairs {
            *counts.entry(p.cell().to_string()).or_insert(0) += 1;
        }
        Manifest {
            header: ManifestHeader {
                subset: subset.to_owned(),
                spec: spec.cloned(),
                seed: spec.map(|s| s.seed),
                counts,
                total: pairs.len(),
                input_digest: input_digest.to_owned(),
            },
            pair_ids: pairs.iter().map(|p| p.pair.pair_id.clone()).collect(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for id in &self.pair_ids {
            writeln!(w, "{id}")?;
        }
        Ok(())
    }

    pub fn to_string_lossless(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("manifest is UTF-8")
    }

    /// Reads a manifest. A file without a JSON header line is accepted as a
    /// bare list of pair ids.
    pub fn read_from(r: impl BufRead) -> Result<Manifest, PipelineError> {
        let mut lines = r.lines();
        let mut header = None;
        let mut pair_ids = Vec::new();
        if let Some(first) = lines.next() {
            let first = first.map_err(|e| PipelineError::Manifest(e.to_string()))?;
            let trimmed = first.trim();
            if trimmed.starts_with('{') {
                header = Some(
                    serde_json::from_str(trimmed).map_err(|e| PipelineError::Manifest(e.to_string()))?,
                );
            } else if !trimmed.is_empty() {
                pair_ids.push(trimmed.to_owned());
            }
        }
        for line in lines {
            let line = line.map_err(|e| PipelineError::Manifest(e.to_string()))?;
            let line = line.trim();
            if !line.is_empty() {
                pair_ids.push(line.to_owned());
            }
        }
        let header = header.unwrap_or_else(|| ManifestHeader {
            subset: "adhoc".into(),
            spec: None,
            seed: None,
            counts: BTreeMap::new(),
            total: pair_ids.len(),
            input_digest: String::new(),
        });
        Ok(Manifest { header, pair_ids })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurateOptions {
    pub eval_spec: DatasetSubsetSpec,
    pub dev_spec: DatasetSubsetSpec,
    pub wer_gap_threshold: f64,
    pub missing_wer: MissingWerPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curated {
    pub pref: Vec<LabeledPair>,
    pub hq: Vec<LabeledPair>,
    pub splits: Splits,
    pub input_digest: String,
}

impl Curated {
    /// Manifests for pref, hq, eval, dev and train, in that order.
    pub fn manifests(&self, opts: &CurateOptions) -> Vec<Manifest> {
        let d = &self.input_digest;
        vec![
            Manifest::new("pref", None, &self.pref, d),
            Manifest::new("hq", None, &self.hq, d),
            Manifest::new("eval", Some(&opts.eval_spec), &self.splits.eval, d),
            Manifest::new("dev", Some(&opts.dev_spec), &self.splits.dev, d),
            Manifest::new("train", None, &self.splits.train, d),
        ]
    }
}

/// Runs the whole chain from aggregated pairs to the three splits.
pub fn curate(pairs: &[AggregatedPair], opts: &CurateOptions) -> Result<Curated, PipelineError> {
    let pref = build_pref(pairs);
    let hq = build_hq(&pref, opts.wer_gap_threshold, opts.missing_wer)?;
    let splits = stratified_sample(&hq, &opts.eval_spec, &opts.dev_spec)?;
    Ok(Curated {
        pref,
        hq,
        splits,
        input_digest: input_digest(pairs),
    })
}
