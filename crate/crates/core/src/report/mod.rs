//! Judge accuracy against human labels, facet breakdowns and report output.

mod consistency;

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use consistency::{
    consistency_check, parse_meta_judgment, ConsistencyFailure, ConsistencyReport,
    ConsistencyResult, MetaJudgeConfig, META_JUDGE_SYSTEM_PROMPT,
};

use crate::judge::JudgeVerdict;
use crate::model::{BinaryPreference, PairMeta};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("no ground-truth label for pair `{0}`")]
    MissingGroundTruth(String),
    #[error("no verdicts to score")]
    EmptyInput,
    #[error("unknown facet `{0}` (expected subset, target_lang, lang_setting, style or pair_kind)")]
    UnknownFacet(String),
    #[error("no metadata for pair `{0}`")]
    MissingMeta(String),
    #[error("verdict for pair `{0}` carries no CoT text")]
    NoCotText(String),
    #[error("meta-judge reply for pair `{pair_id}` unparseable after {attempts} attempts")]
    UnparseableMetaJudgment { pair_id: String, attempts: u32 },
    #[error(transparent)]
    Judge(#[from] crate::judge::JudgeError),
}

/// How a verdict without a preference is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainPolicy {
    /// Half a point, the expected score of a coin flip.
    #[default]
    HalfCredit,
    CountWrong,
    /// Dropped from numerator and denominator.
    Exclude,
}

impl AbstainPolicy {
    pub const ALL: [AbstainPolicy; 3] = [
        AbstainPolicy::HalfCredit,
        AbstainPolicy::CountWrong,
        AbstainPolicy::Exclude,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AbstainPolicy::HalfCredit => "half_credit",
            AbstainPolicy::CountWrong => "count_wrong",
            AbstainPolicy::Exclude => "exclude",
        }
    }
}

impl fmt::Display for AbstainPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AbstainPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AbstainPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown abstain policy `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    /// Fraction in [0, 1]. Zero when nothing was scored (`n_scored == 0`).
    pub accuracy: f64,
    /// Verdicts considered.
    pub n: usize,
    /// Denominator actually used; smaller than `n` only under `exclude`.
    pub n_scored: usize,
    pub correct: usize,
    pub abstentions: usize,
    pub abstention_rate: f64,
}

/// Fraction of verdicts whose preference equals the human label.
pub fn accuracy(
    verdicts: &[JudgeVerdict],
    labels: &HashMap<String, BinaryPreference>,
    policy: AbstainPolicy,
) -> Result<AccuracySummary, ReportError> {
    if verdicts.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut correct = 0usize;
    let mut abstentions = 0usize;
    for v in verdicts {
        let truth = labels
            .get(&v.pair_id)
            .ok_or_else(|| ReportError::MissingGroundTruth(v.pair_id.clone()))?;
        match v.final_preference.binary() {
            Some(p) if p == *truth => correct += 1,
            Some(_) => {}
            None => abstentions += 1,
        }
    }
    let n = verdicts.len();
    let (credit, n_scored) = match policy {
        AbstainPolicy::HalfCredit => (correct as f64 + 0.5 * abstentions as f64, n),
        AbstainPolicy::CountWrong => (correct as f64, n),
        AbstainPolicy::Exclude => (correct as f64, n - abstentions),
    };
    Ok(AccuracySummary {
        accuracy: if n_scored == 0 { 0.0 } else { credit / n_scored as f64 },
        n,
        n_scored,
        correct,
        abstentions,
        abstention_rate: abstentions as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    Subset,
    TargetLang,
    LangSetting,
    Style,
    PairKind,
}

impl Facet {
    pub fn name(self) -> &'static str {
        match self {
            Facet::Subset => "subset",
            Facet::TargetLang => "target_lang",
            Facet::LangSetting => "lang_setting",
            Facet::Style => "style",
            Facet::PairKind => "pair_kind",
        }
    }

    pub fn value_of(self, meta: &PairMeta) -> String {
        fn name<T: Serialize>(v: &T) -> String {
            match serde_json::to_value(v) {
                Ok(serde_json::Value::String(s)) => s,
                _ => "none".into(),
            }
        }
        match self {
            Facet::Subset => name(&meta.subset),
            Facet::TargetLang => name(&meta.target_lang),
            Facet::LangSetting => name(&meta.lang_setting),
            Facet::Style => meta.style.as_ref().map_or_else(|| "none".into(), name),
            Facet::PairKind => name(&meta.pair_kind),
        }
    }

    /// Parses a comma-separated facet list.
    pub fn parse_list(s: &str) -> Result<Vec<Facet>, ReportError> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl FromStr for Facet {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Facet::Subset,
            Facet::TargetLang,
            Facet::LangSetting,
            Facet::Style,
            Facet::PairKind,
        ]
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| ReportError::UnknownFacet(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetRow {
    pub value: String,
    pub accuracy: f64,
    pub n: usize,
    pub n_scored: usize,
    pub abstentions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub judge_id: String,
    pub mode: String,
    pub policy: AbstainPolicy,
    pub overall: AccuracySummary,
    /// Overall accuracy under every abstain policy, for side-by-side reading.
    pub overall_by_policy: BTreeMap<AbstainPolicy, AccuracySummary>,
    pub facets: BTreeMap<Facet, Vec<FacetRow>>,
}

/// Overall and per-facet-value accuracy of one judge's verdicts.
pub fn facet_breakdown(
    verdicts: &[JudgeVerdict],
    labels: &HashMap<String, BinaryPreference>,
    meta: &HashMap<String, PairMeta>,
    facets: &[Facet],
    policy: AbstainPolicy,
) -> Result<EvalReport, ReportError> {
    let overall = accuracy(verdicts, labels, policy)?;
    let overall_by_policy = AbstainPolicy::ALL
        .into_iter()
        .map(|p| Ok((p, accuracy(verdicts, labels, p)?)))
        .collect::<Result<_, ReportError>>()?;

    let mut facet_rows = BTreeMap::new();
    for &facet in facets {
        let mut groups: BTreeMap<String, Vec<JudgeVerdict>> = BTreeMap::new();
        for v in verdicts {
            let m = meta
                .get(&v.pair_id)
                .ok_or_else(|| ReportError::MissingMeta(v.pair_id.clone()))?;
            groups.entry(facet.value_of(m)).or_default().push(v.clone());
        }
        let rows = groups
            .into_iter()
            .map(|(value, vs)| {
                let s = accuracy(&vs, labels, policy)?;
                Ok(FacetRow {
                    value,
                    accuracy: s.accuracy,
                    n: s.n,
                    n_scored: s.n_scored,
                    abstentions: s.abstentions,
                })
            })
            .collect::<Result<Vec<_>, ReportError>>()?;
        facet_rows.insert(facet, rows);
    }

    let first = &verdicts[0];
    Ok(EvalReport {
        judge_id: first.judge_id.clone(),
        mode: first.mode.clone(),
        policy,
        overall,
        overall_by_policy,
        facets: facet_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Object,
    Csv,
    MarkdownTable,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "object" | "json" => Ok(ReportFormat::Object),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "markdown_table" | "md" => Ok(ReportFormat::MarkdownTable),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

fn pct(acc: f64, n_scored: usize) -> String {
    if n_scored == 0 {
        "n/a".into()
    } else {
        format!("{:.1}", acc * 100.0)
    }
}

fn policy_line(report: &EvalReport) -> String {
    report
        .overall_by_policy
        .iter()
        .map(|(p, s)| format!("{p} {}", pct(s.accuracy, s.n_scored)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Renders a report. Tables hold one row per facet value; the overall figures
/// precede the table (as `#` comment lines in CSV).
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    let o = &report.overall;
    match format {
        ReportFormat::Object => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "# judge_id={} mode={} policy={} accuracy_pct={} n={} abstentions={}",
                report.judge_id,
                report.mode,
                report.policy,
                pct(o.accuracy, o.n_scored),
                o.n,
                o.abstentions
            );
            let _ = writeln!(s, "# by_policy: {}", policy_line(report));
            s.push_str("facet,value,accuracy_pct,n,abstentions\n");
            for (facet, rows) in &report.facets {
                for r in rows {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        facet.name(),
                        r.value,
                        pct(r.accuracy, r.n_scored),
                        r.n,
                        r.abstentions
                    );
                }
            }
            s
        }
        ReportFormat::MarkdownTable => {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "Judge `{}` ({}), policy `{}`: **{}%** accuracy over {} pairs, {} abstentions ({:.1}%)",
                report.judge_id,
                report.mode,
                report.policy,
                pct(o.accuracy, o.n_scored),
                o.n,
                o.abstentions,
                o.abstention_rate * 100.0
            );
            let _ = writeln!(s, "\nBy policy: {}\n", policy_line(report));
            s.push_str("| Facet | Value | Accuracy (%) | N | Abstentions |\n");
            s.push_str("|---|---|---:|---:|---:|\n");
            for (facet, rows) in &report.facets {
                for r in rows {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {} | {} |",
                        facet.name(),
                        r.value,
                        pct(r.accuracy, r.n_scored),
                        r.n,
                        r.abstentions
                    );
                }
            }
            s
        }
    }
}

/// Convenience: builds the label map for `accuracy` from (pair id, label) pairs.
pub fn label_map<I, S>(labels: I) -> HashMap<String, BinaryPreference>
where
    I: IntoIterator<Item = (S, BinaryPreference)>,
    S: Into<String>,
{
    labels.into_iter().map(|(k, v)| (k.into(), v)).collect()
}
