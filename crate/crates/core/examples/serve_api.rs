//! Starts the annotation HTTP API on a free port and drives it with a
//! client: ingest, fetch a task, stream the audio, submit, check progress.
//!
//!     cargo run --example serve_api
//!
//! Pass `--hold` to keep the server up until Ctrl-C.

mod common;

use std::sync::Arc;

use serde_json::{json, Value};
use speechpref::annotation::{serve, AnnotationStore, AppState, ServiceConfig};
use speechpref::model::{LangSetting, Subset};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = ServiceConfig {
        storage_path: Some(dir.path().join("store")),
        audio_root: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let store = Arc::new(AnnotationStore::open(config)?);
    let state = AppState { store, token: Some("demo-token".into()) };

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, state, async {
        let _ = stopped.await;
    }));
    println!("serving on {base}");

    let http = reqwest::Client::new();
    let api = |path: &str| format!("{base}{path}");

    let r = http.get(api("/api/progress")).send().await?;
    println!("without token: {}", r.status());

    let pairs: Vec<_> = ["p1", "p2"]
        .iter()
        .map(|id| common::pair(id, Subset::Expressive, LangSetting::Zh2en, (0.04, 0.1)))
        .collect();
    common::write_audio(dir.path(), &pairs);
    let r: Value = http
        .post(api("/api/pairs"))
        .bearer_auth("demo-token")
        .body(common::jsonl(&pairs))
        .send()
        .await?
        .json()
        .await?;
    println!("ingest: {r}");

    http.post(api("/api/annotators"))
        .bearer_auth("demo-token")
        .json(&json!({ "annotator_id": "ana", "qualified_langs": ["en"] }))
        .send()
        .await?
        .error_for_status()?;

    let task: Value = http
        .get(api("/api/tasks/next?annotator=ana"))
        .bearer_auth("demo-token")
        .send()
        .await?
        .json()
        .await?;
    println!("task: {} ({}), lease until {}", task["pair_id"], task["kind"], task["expires_at"]);

    let audio_id = task["audio_a"]["audio_id"].as_str().unwrap_or_default();
    let audio = http.get(api(&format!("/api/audio/{audio_id}"))).bearer_auth("demo-token").send().await?;
    println!("audio {audio_id}: {} {:?}", audio.status(), audio.headers().get("content-type"));

    let r: Value = http
        .post(api("/api/annotations"))
        .bearer_auth("demo-token")
        .json(&json!({
            "pair_id": task["pair_id"],
            "annotator_id": "ana",
            "cmos": "A1",
            "intelligible_a": true,
            "intelligible_b": false,
        }))
        .send()
        .await?
        .json()
        .await?;
    println!("submit: {r}");

    let again = http
        .post(api("/api/annotations"))
        .bearer_auth("demo-token")
        .json(&json!({ "pair_id": task["pair_id"], "annotator_id": "ana", "cmos": "B1", "intelligible_a": true, "intelligible_b": true }))
        .send()
        .await?;
    println!("resubmit: {} {}", again.status(), again.text().await?);

    let progress: Value = http.get(api("/api/progress")).bearer_auth("demo-token").send().await?.json().await?;
    println!("progress: {progress}");

    if std::env::args().any(|a| a == "--hold") {
        println!("holding; Ctrl-C to stop");
        tokio::signal::ctrl_c().await?;
    }
    let _ = stop.send(());
    server.await??;
    Ok(())
}
