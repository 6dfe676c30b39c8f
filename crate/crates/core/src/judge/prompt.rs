//! Prompt documents sent to generative judges.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::JudgeError;
use crate::model::{AudioRef, BinaryPreference, SpeechPair};

const INTRO: &str = "We are comparing the naturalness of two models' outputs. \
The models need to speak the target text accurately and naturally.";
const SCORE_REQUEST: &str =
    ". Analyze the two outputs above, and score them with number from 1 to 10. Note:";
const CRITERIA: &str = "Please evaluate the naturalness of both audio outputs based on the \
following criteria: Prosody and Intonation, Pacing and Rhythm, Articulation and Clarity, and \
Overall Naturalness.";
const COT_TEMPLATE: &str = "After conducting a detailed analysis of each criterion, using the \
following output template to highlight your conclusion: Output A: X, Output B: X.";
const PLAIN_TEMPLATE: &str =
    "Using the following output template to highlight your conclusion: Output A: X, Output B: X.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PromptMode {
    #[default]
    Plain,
    Cot,
    /// Plain prompt preceded by `k` labeled exemplars.
    Fewshot(usize),
}

impl PromptMode {
    pub fn audio_count(self) -> usize {
        match self {
            PromptMode::Plain | PromptMode::Cot => 2,
            PromptMode::Fewshot(k) => 2 * (k + 1),
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptMode::Plain => f.write_str("plain"),
            PromptMode::Cot => f.write_str("cot"),
            PromptMode::Fewshot(k) => write!(f, "fewshot:{k}"),
        }
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(PromptMode::Plain),
            "cot" => Ok(PromptMode::Cot),
            _ => s
                .strip_prefix("fewshot:")
                .and_then(|k| k.parse().ok())
                .map(PromptMode::Fewshot)
                .ok_or_else(|| format!("unknown prompt mode `{s}` (expected plain, cot or fewshot:K)")),
        }
    }
}

impl Serialize for PromptMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PromptMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Text { text: String },
    Audio { audio_id: String, uri: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub mode: PromptMode,
    pub segments: Vec<Segment>,
}

impl PromptDocument {
    pub fn audio_ids(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Audio { audio_id, .. } => Some(audio_id.as_str()),
            Segment::Text { .. } => None,
        })
    }

    /// Flattened text with `<audio:ID>` standing in for each attachment.
    pub fn to_text(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text { text } => text.clone(),
                Segment::Audio { audio_id, .. } => format!("<audio:{audio_id}>"),
            })
            .collect()
    }
}

/// A labeled pair shown to the judge ahead of the query pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub pair: SpeechPair,
    pub label: BinaryPreference,
}

#[derive(Default)]
struct Builder {
    segments: Vec<Segment>,
}

impl Builder {
    fn text(&mut self, t: &str) {
        if let Some(Segment::Text { text }) = self.segments.last_mut() {
            text.push_str(t);
        } else {
            self.segments.push(Segment::Text { text: t.to_owned() });
        }
    }

    fn audio(&mut self, a: &AudioRef) {
        self.segments.push(Segment::Audio {
            audio_id: a.audio_id.clone(),
            uri: a.uri.clone(),
        });
    }

    fn pair_line(&mut self, pair: &SpeechPair) {
        self.text(&format!("Target text: {}, Output A: ", pair.target_text));
        self.audio(&pair.audio_a);
        self.text(", Output B: ");
        self.audio(&pair.audio_b);
    }
}

/// Renders the judge prompt for `pair`. Audios appear in stored (A, B) order.
pub fn render_prompt(
    mode: PromptMode,
    pair: &SpeechPair,
    exemplars: &[Exemplar],
) -> Result<PromptDocument, JudgeError> {
    let mut b = Builder::default();
    if let PromptMode::Fewshot(k) = mode {
        if exemplars.len() != k {
            return Err(JudgeError::MissingExemplars {
                needed: k,
                got: exemplars.len(),
            });
        }
        b.text(&format!("Here are {k} examples of human naturalness judgments.\n\n"));
        for (i, ex) in exemplars.iter().enumerate() {
            b.text(&format!("Example {}:\n", i + 1));
            b.pair_line(&ex.pair);
            let side = match ex.label {
                BinaryPreference::A => "A",
                BinaryPreference::B => "B",
            };
            b.text(&format!(".\nHuman judgment: Output {side} is more natural.\n\n"));
        }
    }
    b.text(INTRO);
    b.text("\n");
    b.pair_line(pair);
    b.text(SCORE_REQUEST);
    match mode {
        PromptMode::Cot => {
            b.text(&format!("\n- {CRITERIA}\n- {COT_TEMPLATE}"));
        }
        PromptMode::Plain | PromptMode::Fewshot(_) => {
            b.text(&format!("\n- {PLAIN_TEMPLATE}"));
        }
    }
    Ok(PromptDocument {
        mode,
        segments: b.segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::pair;

    #[test]
    fn plain_has_no_criteria_block() {
        let doc = render_prompt(PromptMode::Plain, &pair("p"), &[]).unwrap();
        let text = doc.to_text();
        assert!(text.contains("score them with number from 1 to 10"));
        assert!(text.contains("Output A: X, Output B: X."));
        assert!(!text.contains("Prosody and Intonation"));
        assert!(!text.contains("detailed analysis"));
        assert_eq!(doc.audio_ids().collect::<Vec<_>>(), vec!["p-a", "p-b"]);
    }

    #[test]
    fn cot_adds_criteria_verbatim() {
        let doc = render_prompt(PromptMode::Cot, &pair("p"), &[]).unwrap();
        let text = doc.to_text();
        assert!(text.contains("detailed analysis of each criterion"));
        assert!(text.contains(
            "Prosody and Intonation, Pacing and Rhythm, Articulation and Clarity, and Overall Naturalness."
        ));
        assert_eq!(doc.audio_ids().count(), 2);
    }

    #[test]
    fn fewshot_counts_placeholders() {
        let ex = vec![
            Exemplar { pair: pair("e1"), label: BinaryPreference::A },
            Exemplar { pair: pair("e2"), label: BinaryPreference::B },
        ];
        let doc = render_prompt(PromptMode::Fewshot(2), &pair("p"), &ex).unwrap();
        assert_eq!(doc.audio_ids().count(), 6);
        assert_eq!(doc.audio_ids().count(), PromptMode::Fewshot(2).audio_count());
        // the query pair comes last
        assert_eq!(doc.audio_ids().last(), Some("p-b"));
        assert!(doc.to_text().contains("Human judgment: Output B is more natural."));
        assert_eq!(
            render_prompt(PromptMode::Fewshot(3), &pair("p"), &ex),
            Err(JudgeError::MissingExemplars { needed: 3, got: 2 })
        );
    }

    #[test]
    fn rendering_is_byte_stable() {
        for mode in [PromptMode::Plain, PromptMode::Cot] {
            let a = serde_json::to_string(&render_prompt(mode, &pair("p"), &[]).unwrap()).unwrap();
            let b = serde_json::to_string(&render_prompt(mode, &pair("p"), &[]).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mode_round_trips_through_strings() {
        for m in [PromptMode::Plain, PromptMode::Cot, PromptMode::Fewshot(4)] {
            assert_eq!(m.to_string().parse::<PromptMode>().unwrap(), m);
        }
        assert!("fewshot:x".parse::<PromptMode>().is_err());
    }
}
