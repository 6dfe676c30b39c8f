#![allow(dead_code)]

use std::path::Path;

use chrono::{TimeZone, Utc};
use speechpref::model::{
    Annotation, AudioRef, CmosScore, LangSetting, PairKind, PairMeta, SpeechPair, Subset,
};

pub fn pair(id: &str, subset: Subset, setting: LangSetting, wer_a: Option<f64>, wer_b: Option<f64>) -> SpeechPair {
    SpeechPair {
        pair_id: id.to_owned(),
        target_text: format!("Target sentence for {id}."),
        audio_a: AudioRef {
            audio_id: format!("{id}-a"),
            uri: format!("{id}-a.wav"),
            model_id: "tts-1".into(),
            wer: wer_a,
        },
        audio_b: AudioRef {
            audio_id: format!("{id}-b"),
            uri: format!("{id}-b.wav"),
            model_id: "tts-2".into(),
            wer: wer_b,
        },
        meta: PairMeta {
            subset,
            ref_source: "fixture".into(),
            lang_setting: setting,
            target_lang: setting.target_lang(),
            ref_lang: setting.ref_lang(),
            pair_kind: PairKind::InterModel,
            style: None,
        },
    }
}

pub fn en_pair(id: &str) -> SpeechPair {
    pair(id, Subset::Regular, LangSetting::En2en, Some(0.02), Some(0.04))
}

pub fn ann(pair_id: &str, annotator: &str, cmos: CmosScore) -> Annotation {
    Annotation {
        pair_id: pair_id.to_owned(),
        annotator_id: annotator.to_owned(),
        cmos,
        intelligible_a: true,
        intelligible_b: true,
        submitted_at: Utc.with_ymd_and_hms(2025, 3, 1, 12, 0, 0).unwrap(),
        presented_swapped: false,
    }
}

/// Writes a few placeholder bytes for both clips of each pair.
pub fn write_audio(dir: &Path, pairs: &[SpeechPair]) {
    for p in pairs {
        for a in [&p.audio_a, &p.audio_b] {
            std::fs::write(dir.join(&a.uri), format!("RIFF{}", a.audio_id)).unwrap();
        }
    }
}

pub fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).unwrap() + "\n")
        .collect()
}
