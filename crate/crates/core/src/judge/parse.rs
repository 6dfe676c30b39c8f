//! Extraction of `Output A: x, Output B: y` conclusions from judge text.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::JudgePreference;

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 10.0;

static TEMPLATE: LazyLock<Regex> = LazyLock::new(|| {
    let num = r"(\d+(?:\.\d+)?)";
    let tail = r"(?:\s*/\s*10)?(?:\s*points?)?";
    let pattern = format!(
        r"(?i)\b(?:output\s*)?a\s*\**\s*[:：=]\s*\**\s*{num}{tail}\**\s*[,;，、.]?\s*(?:and\s+)?\**\s*\b(?:output\s*)?b\s*\**\s*[:：=]\s*\**\s*{num}"
    );
    Regex::new(&pattern).expect("template regex compiles")
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutError {
    ParseFailure,
}

/// One sampled completion and what was read out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_b: Option<f64>,
    pub preference: JudgePreference,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RolloutError>,
    #[serde(default)]
    pub retries: u32,
    #[serde(default)]
    pub latency_ms: u64,
}

/// Reads the last score template in `raw_text`.
///
/// Scores are clamped to [1, 10]; the higher score wins and equal scores
/// abstain. Text without a template yields a parse failure.
pub fn parse_verdict(raw_text: &str) -> Rollout {
    let last = TEMPLATE.captures_iter(raw_text).last();
    let scores = last.and_then(|c| {
        let a: f64 = c[1].parse().ok()?;
        let b: f64 = c[2].parse().ok()?;
        Some((a.clamp(SCORE_MIN, SCORE_MAX), b.clamp(SCORE_MIN, SCORE_MAX)))
    });
    match scores {
        Some((a, b)) => Rollout {
            raw_text: raw_text.to_owned(),
            score_a: Some(a),
            score_b: Some(b),
            preference: if a > b {
                JudgePreference::A
            } else if b > a {
                JudgePreference::B
            } else {
                JudgePreference::Abstain
            },
            error: None,
            retries: 0,
            latency_ms: 0,
        },
        None => Rollout {
            raw_text: raw_text.to_owned(),
            score_a: None,
            score_b: None,
            preference: JudgePreference::Abstain,
            error: Some(RolloutError::ParseFailure),
            retries: 0,
            latency_ms: 0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example_conclusion() {
        let r = parse_verdict("...clear articulation.\n\n**Conclusion:** Output A: 4, Output B: 8.5");
        assert_eq!((r.score_a, r.score_b), (Some(4.0), Some(8.5)));
        assert_eq!(r.preference, JudgePreference::B);
        assert_eq!(r.error, None);
    }

    #[test]
    fn equal_scores_abstain() {
        let r = parse_verdict("Output A: 7, Output B: 7");
        assert_eq!(r.preference, JudgePreference::Abstain);
        assert_eq!(r.error, None);
    }

    #[test]
    fn no_template_is_a_parse_failure() {
        let r = parse_verdict("I cannot judge this.");
        assert_eq!(r.error, Some(RolloutError::ParseFailure));
        assert_eq!(r.preference, JudgePreference::Abstain);
        assert_eq!(r.score_a, None);
    }

    #[test]
    fn last_occurrence_wins() {
        let r = parse_verdict("Draft: Output A: 9, Output B: 2. On reflection... Output A: 3, Output B: 6");
        assert_eq!((r.score_a, r.score_b), (Some(3.0), Some(6.0)));
    }

    #[test]
    fn tolerant_forms() {
        for (text, a, b) in [
            ("output a: 8; output b: 3", 8.0, 3.0),
            ("**Output A:** 6.5, **Output B:** 7", 6.5, 7.0),
            ("A:8,B:3", 8.0, 3.0),
            ("Output A: 7/10, Output B: 9/10", 7.0, 9.0),
            ("A: 5 points, B: 2 points", 5.0, 2.0),
            ("OUTPUT A = 2 and OUTPUT B = 4", 2.0, 4.0),
        ] {
            let r = parse_verdict(text);
            assert_eq!((r.score_a, r.score_b), (Some(a), Some(b)), "{text}");
        }
    }

    #[test]
    fn scores_are_clamped() {
        let r = parse_verdict("Output A: 0, Output B: 12");
        assert_eq!((r.score_a, r.score_b), (Some(1.0), Some(10.0)));
    }

    #[test]
    fn words_ending_in_a_do_not_match() {
        assert_eq!(parse_verdict("data: 5, b: 3").error, Some(RolloutError::ParseFailure));
        let r = parse_verdict("Extra: 5, Beta: 3");
        assert_eq!(r.error, Some(RolloutError::ParseFailure));
    }

    proptest! {
        #[test]
        fn template_round_trips_on_the_grid(a in 10u32..=100, b in 10u32..=100) {
            let (x, y) = (a as f64 / 10.0, b as f64 / 10.0);
            let r = parse_verdict(&format!("Output A: {x}, Output B: {y}"));
            prop_assert_eq!(r.score_a, Some(x));
            prop_assert_eq!(r.score_b, Some(y));
        }
    }
}
