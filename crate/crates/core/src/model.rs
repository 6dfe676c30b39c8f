//! Shared domain types for speech pairs, annotations and labels.
//!
//! Every type here is an immutable value with a canonical JSON form
//! (snake_case fields, one object per line when streamed).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One audio clip taking part in a comparison. The blob itself is opaque.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioRef {
    pub audio_id: String,
    /// File path or URL of the audio blob.
    pub uri: String,
    /// Identifier of the system that generated the clip.
    pub model_id: String,
    /// Word error rate as a fraction (0.05 = 5%). Unbounded above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Regular,
    Expressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lang {
    En,
    Zh,
    Mixed,
}

/// Reference-language to target-language synthesis setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangSetting {
    En2en,
    Zh2en,
    Zh2zh,
    En2zh,
    En2mixed,
    Zh2mixed,
}

impl LangSetting {
    pub fn ref_lang(self) -> Lang {
        match self {
            LangSetting::En2en | LangSetting::En2zh | LangSetting::En2mixed => Lang::En,
            LangSetting::Zh2en | LangSetting::Zh2zh | LangSetting::Zh2mixed => Lang::Zh,
        }
    }

    pub fn target_lang(self) -> Lang {
        match self {
            LangSetting::En2en | LangSetting::Zh2en => Lang::En,
            LangSetting::Zh2zh | LangSetting::En2zh => Lang::Zh,
            LangSetting::En2mixed | LangSetting::Zh2mixed => Lang::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    IntraModel,
    InterModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Regular,
    Emotional,
    Accented,
    Whisper,
    Game,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMeta {
    pub subset: Subset,
    pub ref_source: String,
    pub lang_setting: LangSetting,
    pub target_lang: Lang,
    pub ref_lang: Lang,
    pub pair_kind: PairKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<Style>,
}

/// One benchmark item: a target text and two synthesized renditions of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechPair {
    pub pair_id: String,
    pub target_text: String,
    pub audio_a: AudioRef,
    pub audio_b: AudioRef,
    pub meta: PairMeta,
}

impl SpeechPair {
    pub fn audio(&self, side: BinaryPreference) -> &AudioRef {
        match side {
            BinaryPreference::A => &self.audio_a,
            BinaryPreference::B => &self.audio_b,
        }
    }

    /// Absolute WER gap between the two clips, when both are known.
    pub fn wer_gap(&self) -> Option<f64> {
        Some((self.audio_a.wer? - self.audio_b.wer?).abs())
    }
}

/// Five-point comparative naturalness score. Positive values favour audio A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CmosScore {
    A2,
    A1,
    Tie,
    B1,
    B2,
}

impl CmosScore {
    pub const ALL: [CmosScore; 5] = [
        CmosScore::A2,
        CmosScore::A1,
        CmosScore::Tie,
        CmosScore::B1,
        CmosScore::B2,
    ];

    pub fn value(self) -> i8 {
        match self {
            CmosScore::A2 => 2,
            CmosScore::A1 => 1,
            CmosScore::Tie => 0,
            CmosScore::B1 => -1,
            CmosScore::B2 => -2,
        }
    }

    pub fn from_value(value: i8) -> Option<CmosScore> {
        match value {
            2 => Some(CmosScore::A2),
            1 => Some(CmosScore::A1),
            0 => Some(CmosScore::Tie),
            -1 => Some(CmosScore::B1),
            -2 => Some(CmosScore::B2),
            _ => None,
        }
    }

    /// Same judgment with the two audios presented in the opposite order.
    pub fn mirrored(self) -> CmosScore {
        CmosScore::from_value(-self.value()).expect("negation stays on the scale")
    }

    pub fn to_ternary(self) -> TernaryLabel {
        cmos_to_ternary(self)
    }
}

impl fmt::Display for CmosScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CmosScore::A2 => "A2",
            CmosScore::A1 => "A1",
            CmosScore::Tie => "Tie",
            CmosScore::B1 => "B1",
            CmosScore::B2 => "B2",
        };
        f.write_str(s)
    }
}

/// Collapses the five-point scale to which side (if any) was preferred.
pub fn cmos_to_ternary(score: CmosScore) -> TernaryLabel {
    match score.value().signum() {
        1 => TernaryLabel::A,
        -1 => TernaryLabel::B,
        _ => TernaryLabel::Tie,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TernaryLabel {
    A,
    B,
    Tie,
}

impl TernaryLabel {
    pub fn to_binary(self) -> Option<BinaryPreference> {
        match self {
            TernaryLabel::A => Some(BinaryPreference::A),
            TernaryLabel::B => Some(BinaryPreference::B),
            TernaryLabel::Tie => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryPreference {
    A,
    B,
}

impl BinaryPreference {
    pub fn flipped(self) -> BinaryPreference {
        match self {
            BinaryPreference::A => BinaryPreference::B,
            BinaryPreference::B => BinaryPreference::A,
        }
    }
}

impl From<BinaryPreference> for TernaryLabel {
    fn from(p: BinaryPreference) -> Self {
        match p {
            BinaryPreference::A => TernaryLabel::A,
            BinaryPreference::B => TernaryLabel::B,
        }
    }
}

/// Outcome of an automated judge: a side, or no preference at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JudgePreference {
    A,
    B,
    Abstain,
}

impl JudgePreference {
    pub fn binary(self) -> Option<BinaryPreference> {
        match self {
            JudgePreference::A => Some(BinaryPreference::A),
            JudgePreference::B => Some(BinaryPreference::B),
            JudgePreference::Abstain => None,
        }
    }

    pub fn flipped(self) -> JudgePreference {
        match self {
            JudgePreference::A => JudgePreference::B,
            JudgePreference::B => JudgePreference::A,
            JudgePreference::Abstain => JudgePreference::Abstain,
        }
    }
}

impl From<BinaryPreference> for JudgePreference {
    fn from(p: BinaryPreference) -> Self {
        match p {
            BinaryPreference::A => JudgePreference::A,
            BinaryPreference::B => JudgePreference::B,
        }
    }
}

impl From<Option<BinaryPreference>> for JudgePreference {
    fn from(p: Option<BinaryPreference>) -> Self {
        p.map_or(JudgePreference::Abstain, Into::into)
    }
}

/// One labeler's judgment of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub pair_id: String,
    pub annotator_id: String,
    pub cmos: CmosScore,
    pub intelligible_a: bool,
    pub intelligible_b: bool,
    pub submitted_at: DateTime<Utc>,
    /// Whether the annotator heard the two clips in swapped order. The stored
    /// `cmos` and intelligibility flags are always relative to the stored order.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub presented_swapped: bool,
}

impl Annotation {
    pub fn ternary(&self) -> TernaryLabel {
        cmos_to_ternary(self.cmos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgreementLevel {
    /// Full agreement.
    FA,
    /// Weak agreement.
    WA,
    /// Weak disagreement.
    WD,
    /// Full disagreement.
    FD,
}

impl FromStr for AgreementLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "FA" => Ok(AgreementLevel::FA),
            "WA" => Ok(AgreementLevel::WA),
            "WD" => Ok(AgreementLevel::WD),
            "FD" => Ok(AgreementLevel::FD),
            other => Err(format!("unknown agreement level `{other}`")),
        }
    }
}

/// Consensus label of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConsensusLabel {
    A,
    B,
    Tie,
    Undecided,
}

impl ConsensusLabel {
    pub fn to_binary(self) -> Option<BinaryPreference> {
        match self {
            ConsensusLabel::A => Some(BinaryPreference::A),
            ConsensusLabel::B => Some(BinaryPreference::B),
            ConsensusLabel::Tie | ConsensusLabel::Undecided => None,
        }
    }
}

impl From<TernaryLabel> for ConsensusLabel {
    fn from(t: TernaryLabel) -> Self {
        match t {
            TernaryLabel::A => ConsensusLabel::A,
            TernaryLabel::B => ConsensusLabel::B,
            TernaryLabel::Tie => ConsensusLabel::Tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedLabel {
    pub pair_id: String,
    pub label: ConsensusLabel,
    pub agreement: AgreementLevel,
    pub n_annotations: u32,
}

/// All annotations collected for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnnotations {
    pub pair_id: String,
    pub annotations: Vec<Annotation>,
}

/// Groups a flat annotation list by pair, ordered by pair id.
pub fn group_by_pair<'a, I>(annotations: I) -> Vec<PairAnnotations>
where
    I: IntoIterator<Item = &'a Annotation>,
{
    let mut grouped: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
    for a in annotations {
        grouped.entry(&a.pair_id).or_default().push(a.clone());
    }
    grouped
        .into_iter()
        .map(|(pair_id, annotations)| PairAnnotations {
            pair_id: pair_id.to_owned(),
            annotations,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("audio_a and audio_b share audio id `{0}`")]
    DuplicateAudioId(String),
    #[error("lang_setting {setting:?} is inconsistent with ref_lang {ref_lang:?} / target_lang {target_lang:?}")]
    InconsistentLangSetting {
        setting: LangSetting,
        ref_lang: Lang,
        target_lang: Lang,
    },
    #[error("pair_kind {stored:?} does not match model ids (expected {derived:?})")]
    InconsistentPairKind { stored: PairKind, derived: PairKind },
    #[error("negative WER {wer} on audio `{audio_id}`")]
    NegativeWer { audio_id: String, wer: f64 },
}

/// How unknown fields in ingested records are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldMode {
    #[default]
    Strict,
    Lenient,
}

/// Checks the invariants of an already-decoded pair.
pub fn check_pair(pair: &SpeechPair) -> Result<(), ValidationError> {
    if pair.pair_id.trim().is_empty() {
        return Err(ValidationError::MissingField("pair_id".into()));
    }
    if pair.target_text.trim().is_empty() {
        return Err(ValidationError::MissingField("target_text".into()));
    }
    for (side, audio) in [("audio_a", &pair.audio_a), ("audio_b", &pair.audio_b)] {
        if audio.audio_id.trim().is_empty() {
            return Err(ValidationError::MissingField(format!("{side}.audio_id")));
        }
        if audio.uri.trim().is_empty() {
            return Err(ValidationError::MissingField(format!("{side}.uri")));
        }
        if let Some(wer) = audio.wer {
            if !wer.is_finite() || wer < 0.0 {
                return Err(ValidationError::NegativeWer {
                    audio_id: audio.audio_id.clone(),
                    wer,
                });
            }
        }
    }
    if pair.audio_a.audio_id == pair.audio_b.audio_id {
        return Err(ValidationError::DuplicateAudioId(pair.audio_a.audio_id.clone()));
    }
    let meta = &pair.meta;
    if meta.lang_setting.ref_lang() != meta.ref_lang
        || meta.lang_setting.target_lang() != meta.target_lang
    {
        return Err(ValidationError::InconsistentLangSetting {
            setting: meta.lang_setting,
            ref_lang: meta.ref_lang,
            target_lang: meta.target_lang,
        });
    }
    let derived = if pair.audio_a.model_id == pair.audio_b.model_id {
        PairKind::IntraModel
    } else {
        PairKind::InterModel
    };
    if meta.pair_kind != derived {
        return Err(ValidationError::InconsistentPairKind {
            stored: meta.pair_kind,
            derived,
        });
    }
    Ok(())
}

// Lenient mirrors of the strict record types; serde ignores unknown fields here.
#[derive(Deserialize)]
struct LenientAudio {
    audio_id: String,
    uri: String,
    model_id: String,
    #[serde(default)]
    wer: Option<f64>,
}

#[derive(Deserialize)]
struct LenientMeta {
    subset: Subset,
    ref_source: String,
    lang_setting: LangSetting,
    target_lang: Lang,
    ref_lang: Lang,
    pair_kind: PairKind,
    #[serde(default)]
    style: Option<Style>,
}

#[derive(Deserialize)]
struct LenientPair {
    pair_id: String,
    target_text: String,
    audio_a: LenientAudio,
    audio_b: LenientAudio,
    meta: LenientMeta,
}

impl From<LenientAudio> for AudioRef {
    fn from(a: LenientAudio) -> Self {
        AudioRef {
            audio_id: a.audio_id,
            uri: a.uri,
            model_id: a.model_id,
            wer: a.wer,
        }
    }
}

impl From<LenientPair> for SpeechPair {
    fn from(p: LenientPair) -> Self {
        SpeechPair {
            pair_id: p.pair_id,
            target_text: p.target_text,
            audio_a: p.audio_a.into(),
            audio_b: p.audio_b.into(),
            meta: PairMeta {
                subset: p.meta.subset,
                ref_source: p.meta.ref_source,
                lang_setting: p.meta.lang_setting,
                target_lang: p.meta.target_lang,
                ref_lang: p.meta.ref_lang,
                pair_kind: p.meta.pair_kind,
                style: p.meta.style,
            },
        }
    }
}

fn decode_error(err: serde_json::Error) -> ValidationError {
    let msg = err.to_string();
    // serde reports missing fields as "missing field `name` at line .."
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            return ValidationError::MissingField(rest[..end].to_owned());
        }
    }
    ValidationError::Malformed(msg)
}

/// Decodes one line of the pair ingestion format and validates it.
pub fn validate_pair(line: &str, mode: FieldMode) -> Result<SpeechPair, ValidationError> {
    let pair: SpeechPair = match mode {
        FieldMode::Strict => serde_json::from_str(line).map_err(decode_error)?,
        FieldMode::Lenient => serde_json::from_str::<LenientPair>(line)
            .map_err(decode_error)?
            .into(),
    };
    check_pair(&pair)?;
    Ok(pair)
}


#[cfg(test)]
mod tests {
    use super::fixtures::pair;
    use super::*;
    use proptest::prelude::*;

    fn line(p: &SpeechPair) -> String {
        serde_json::to_string(p).unwrap()
    }

    #[test]
    fn well_formed_record_validates() {
        let p = pair("p1");
        assert_eq!(validate_pair(&line(&p), FieldMode::Strict).unwrap(), p);
    }

    #[test]
    fn zh2en_with_zh_target_is_inconsistent() {
        let mut p = pair("p1");
        p.meta.lang_setting = LangSetting::Zh2en;
        p.meta.ref_lang = Lang::Zh;
        p.meta.target_lang = Lang::Zh;
        assert!(matches!(
            validate_pair(&line(&p), FieldMode::Strict),
            Err(ValidationError::InconsistentLangSetting { .. })
        ));
    }

    #[test]
    fn same_audio_id_is_rejected() {
        let mut p = pair("p1");
        p.audio_b.audio_id = p.audio_a.audio_id.clone();
        assert_eq!(
            validate_pair(&line(&p), FieldMode::Strict),
            Err(ValidationError::DuplicateAudioId("p1-a".into()))
        );
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: serde_json::Value = serde_json::to_value(pair("p1")).unwrap();
        v.as_object_mut().unwrap().remove("target_text");
        assert_eq!(
            validate_pair(&v.to_string(), FieldMode::Strict),
            Err(ValidationError::MissingField("target_text".into()))
        );
    }

    #[test]
    fn unknown_fields_depend_on_mode() {
        let mut v: serde_json::Value = serde_json::to_value(pair("p1")).unwrap();
        v["extra"] = 1.into();
        v["audio_a"]["sample_rate"] = 24000.into();
        assert!(matches!(
            validate_pair(&v.to_string(), FieldMode::Strict),
            Err(ValidationError::Malformed(_))
        ));
        assert_eq!(validate_pair(&v.to_string(), FieldMode::Lenient).unwrap(), pair("p1"));
    }

    #[test]
    fn pair_kind_must_match_model_ids() {
        let mut p = pair("p1");
        p.audio_b.model_id = "m1".into();
        assert!(matches!(
            check_pair(&p),
            Err(ValidationError::InconsistentPairKind { .. })
        ));
        p.meta.pair_kind = PairKind::IntraModel;
        assert!(check_pair(&p).is_ok());
    }

    #[test]
    fn wer_above_one_is_allowed_but_negative_is_not() {
        let mut p = pair("p1");
        p.audio_a.wer = Some(1.7);
        assert!(check_pair(&p).is_ok());
        p.audio_a.wer = Some(-0.1);
        assert!(matches!(check_pair(&p), Err(ValidationError::NegativeWer { .. })));
    }

    #[test]
    fn ternary_collapse() {
        assert_eq!(cmos_to_ternary(CmosScore::A2), TernaryLabel::A);
        assert_eq!(cmos_to_ternary(CmosScore::A1), TernaryLabel::A);
        assert_eq!(cmos_to_ternary(CmosScore::Tie), TernaryLabel::Tie);
        assert_eq!(cmos_to_ternary(CmosScore::B1), TernaryLabel::B);
        assert_eq!(cmos_to_ternary(CmosScore::B2), TernaryLabel::B);
    }

    #[test]
    fn cmos_numeric_map_is_a_bijection() {
        let values: std::collections::BTreeSet<i8> =
            CmosScore::ALL.iter().map(|c| c.value()).collect();
        assert_eq!(values.len(), 5);
        for c in CmosScore::ALL {
            assert_eq!(CmosScore::from_value(c.value()), Some(c));
            assert_eq!(c.mirrored().mirrored(), c);
        }
        assert_eq!(serde_json::to_string(&CmosScore::A2).unwrap(), "\"A2\"");
    }

    #[test]
    fn lang_setting_prefix_and_suffix() {
        assert_eq!(LangSetting::Zh2mixed.ref_lang(), Lang::Zh);
        assert_eq!(LangSetting::Zh2mixed.target_lang(), Lang::Mixed);
        assert_eq!(LangSetting::En2zh.target_lang(), Lang::Zh);
    }

    fn arb_cmos() -> impl Strategy<Value = CmosScore> {
        prop::sample::select(CmosScore::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn ternary_follows_sign(c in arb_cmos()) {
            let expected = match c.value() {
                v if v > 0 => TernaryLabel::A,
                v if v < 0 => TernaryLabel::B,
                _ => TernaryLabel::Tie,
            };
            prop_assert_eq!(cmos_to_ternary(c), expected);
        }

        #[test]
        fn pair_round_trips(
            text in "[a-zA-Z ,.]{1,40}",
            wer_a in proptest::option::of(0.0f64..3.0),
            wer_b in proptest::option::of(0.0f64..3.0),
            style in proptest::option::of(prop::sample::select(vec![Style::Regular, Style::Whisper, Style::Game])),
        ) {
            let mut p = pair("rt");
            p.target_text = format!("x{text}");
            p.audio_a.wer = wer_a;
            p.audio_b.wer = wer_b;
            p.meta.style = style;
            let decoded = validate_pair(&line(&p), FieldMode::Strict).unwrap();
            prop_assert_eq!(decoded, p);
        }

        #[test]
        fn annotation_round_trips(c in arb_cmos(), ia: bool, ib: bool, secs in 0i64..4_000_000_000, swapped: bool) {
            let a = Annotation {
                pair_id: "p".into(),
                annotator_id: "u".into(),
                cmos: c,
                intelligible_a: ia,
                intelligible_b: ib,
                submitted_at: DateTime::from_timestamp(secs, 0).unwrap(),
                presented_swapped: swapped,
            };
            let back: Annotation = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
