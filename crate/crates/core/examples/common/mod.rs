#![allow(dead_code)]

use chrono::Utc;
use speechpref::model::{Annotation, AudioRef, CmosScore, LangSetting, PairKind, PairMeta, SpeechPair, Subset};

pub fn pair(id: &str, subset: Subset, setting: LangSetting, wer: (f64, f64)) -> SpeechPair {
    let audio = |side: &str, model: &str, wer: f64| AudioRef {
        audio_id: format!("{id}-{side}"),
        uri: format!("{id}-{side}.wav"),
        model_id: model.into(),
        wer: Some(wer),
    };
    SpeechPair {
        pair_id: id.into(),
        target_text: format!("Sentence number {id}."),
        audio_a: audio("a", "tts-x", wer.0),
        audio_b: audio("b", "tts-y", wer.1),
        meta: PairMeta {
            subset,
            ref_source: "demo".into(),
            lang_setting: setting,
            target_lang: setting.target_lang(),
            ref_lang: setting.ref_lang(),
            pair_kind: PairKind::InterModel,
            style: None,
        },
    }
}

pub fn annotation(pair_id: &str, annotator: &str, cmos: CmosScore) -> Annotation {
    Annotation {
        pair_id: pair_id.into(),
        annotator_id: annotator.into(),
        cmos,
        intelligible_a: true,
        intelligible_b: true,
        submitted_at: Utc::now(),
        presented_swapped: false,
    }
}

/// Writes a stub file for both clips of each pair.
pub fn write_audio(dir: &std::path::Path, pairs: &[SpeechPair]) {
    for p in pairs {
        for a in [&p.audio_a, &p.audio_b] {
            std::fs::write(dir.join(&a.uri), b"RIFF....WAVE").unwrap();
        }
    }
}

pub fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).unwrap() + "\n").collect()
}
