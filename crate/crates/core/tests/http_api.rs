mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use speechpref::annotation::{AnnotationStore, AppState, ServiceConfig};
use speechpref::model::Lang;

struct Server {
    base: String,
    http: reqwest::Client,
    _stop: oneshot::Sender<()>,
    _dir: tempfile::TempDir,
}

async fn start(token: Option<&str>) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        storage_path: Some(dir.path().join("store")),
        audio_root: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let store = Arc::new(AnnotationStore::open(config).unwrap());
    let state = AppState {
        store,
        token: token.map(str::to_owned),
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = oneshot::channel::<()>();
    tokio::spawn(speechpref::annotation::serve(listener, state, async {
        let _ = rx.await;
    }));
    Server {
        base: format!("http://{addr}"),
        http: reqwest::Client::new(),
        _stop: tx,
        _dir: dir,
    }
}

impl Server {
    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn ingest(&self, ids: &[&str]) -> Value {
        let pairs: Vec<_> = ids.iter().map(|id| common::en_pair(id)).collect();
        common::write_audio(self._dir.path(), &pairs);
        let r = self
            .http
            .post(self.url("/api/pairs"))
            .body(common::jsonl(&pairs))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        r.json().await.unwrap()
    }

    async fn register(&self, id: &str) {
        let r = self
            .http
            .post(self.url("/api/annotators"))
            .json(&json!({ "annotator_id": id, "qualified_langs": [Lang::En] }))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), StatusCode::NO_CONTENT);
    }

    async fn next(&self, annotator: &str) -> reqwest::Response {
        self.http
            .get(self.url(&format!("/api/tasks/next?annotator={annotator}")))
            .send()
            .await
            .unwrap()
    }

    async fn submit(&self, pair_id: &str, annotator: &str, cmos: &str) -> reqwest::Response {
        self.http
            .post(self.url("/api/annotations"))
            .json(&json!({
                "pair_id": pair_id,
                "annotator_id": annotator,
                "cmos": cmos,
                "intelligible_a": true,
                "intelligible_b": true,
            }))
            .send()
            .await
            .unwrap()
    }
}

#[tokio::test]
async fn full_annotation_round_trip() {
    let s = start(None).await;
    let report = s.ingest(&["p1", "p2"]).await;
    assert_eq!(report["accepted"], 2);
    s.register("ann1").await;
    s.register("ann2").await;

    let task: Value = s.next("ann1").await.json().await.unwrap();
    let pair_id = task["pair_id"].as_str().unwrap().to_owned();
    assert_eq!(task["kind"], "initial");
    let r = s.submit(&pair_id, "ann1", "A1").await;
    assert_eq!(r.status(), StatusCode::OK);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["status"], "AwaitingSecond");

    let state: Value = s
        .http
        .get(s.url(&format!("/api/pairs/{pair_id}")))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(state["annotations"].as_array().unwrap().len(), 1);
    assert_eq!(state["status"], "AwaitingSecond");

    let progress: Value = s.http.get(s.url("/api/progress")).send().await.unwrap().json().await.unwrap();
    assert_eq!(progress["total_pairs"], 2);
    assert_eq!(progress["total_annotations"], 1);

    let export = s.http.get(s.url("/api/annotations")).send().await.unwrap();
    assert_eq!(
        export.headers()["content-type"].to_str().unwrap(),
        "application/x-ndjson"
    );
    let text = export.text().await.unwrap();
    assert_eq!(text.lines().count(), 1);
    let a: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(a["annotator_id"], "ann1");
}

#[tokio::test]
async fn empty_queue_is_no_content() {
    let s = start(None).await;
    s.ingest(&["p1"]).await;
    s.register("ann1").await;
    s.register("ann2").await;
    s.register("ann3").await;

    for who in ["ann1", "ann2"] {
        let task: Value = s.next(who).await.json().await.unwrap();
        let cmos = if who == "ann1" { "A2" } else { "B2" };
        assert_eq!(s.submit(task["pair_id"].as_str().unwrap(), who, cmos).await.status(), StatusCode::OK);
    }
    // A vs B disagreement escalates; the two original raters get nothing.
    assert_eq!(s.next("ann1").await.status(), StatusCode::NO_CONTENT);
    let tie: Value = s.next("ann3").await.json().await.unwrap();
    assert_eq!(tie["kind"], "tie_break");
    let r = s.submit("p1", "ann3", "A1").await;
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["status"], "Complete");
    assert_eq!(s.next("ann3").await.status(), StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn duplicate_and_unknown_map_to_http_errors() {
    let s = start(None).await;
    s.ingest(&["p1"]).await;
    s.register("ann1").await;
    s.next("ann1").await;
    assert_eq!(s.submit("p1", "ann1", "Tie").await.status(), StatusCode::OK);

    let dup = s.submit("p1", "ann1", "Tie").await;
    assert_eq!(dup.status(), StatusCode::CONFLICT);
    let body: Value = dup.json().await.unwrap();
    assert_eq!(body["error"], "duplicate_annotation");
    assert!(body["message"].as_str().unwrap().contains("p1"));

    let missing = s.http.get(s.url("/api/pairs/nope")).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    assert_eq!(s.submit("nope", "ann1", "A1").await.status(), StatusCode::NOT_FOUND);

    let bad = s
        .http
        .post(s.url("/api/annotators"))
        .json(&json!({ "annotator_id": "", "qualified_langs": [] }))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn inactive_annotator_is_forbidden() {
    let s = start(None).await;
    s.ingest(&["p1"]).await;
    let r = s
        .http
        .post(s.url("/api/annotators"))
        .json(&json!({ "annotator_id": "gone", "qualified_langs": ["en"], "active": false }))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);
    assert_eq!(s.next("gone").await.status(), StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn ingest_reports_rejected_lines() {
    let s = start(None).await;
    let mut body = common::jsonl(&[common::en_pair("ok")]);
    body.push_str("{not json}\n");
    let r: Value = s
        .http
        .post(s.url("/api/pairs"))
        .body(body)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(r["accepted"], 1);
    assert_eq!(r["rejected"].as_array().unwrap().len(), 1);
    assert_eq!(r["rejected"][0]["line"], 2);
}

#[tokio::test]
async fn serves_audio_with_content_type() {
    let s = start(None).await;
    s.ingest(&["p1"]).await;
    let r = s.http.get(s.url("/api/audio/p1-a")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "audio/wav");
    assert_eq!(r.bytes().await.unwrap().as_ref(), b"RIFFp1-a");

    let r = s.http.get(s.url("/api/audio/zzz")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn remote_audio_redirects() {
    let s = start(None).await;
    let mut p = common::en_pair("web");
    p.audio_a.uri = "https://cdn.example.org/web-a.wav".into();
    s.http
        .post(s.url("/api/pairs"))
        .body(common::jsonl(&[p]))
        .send()
        .await
        .unwrap();
    let http = reqwest::Client::builder()
        .redirect(reqwest::redirect::Policy::none())
        .build()
        .unwrap();
    let r = http.get(s.url("/api/audio/web-a")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::TEMPORARY_REDIRECT);
    assert_eq!(r.headers()["location"], "https://cdn.example.org/web-a.wav");
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let s = start(Some("sesame")).await;
    let r = s.http.get(s.url("/api/progress")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["error"], "unauthorized");

    let r = s
        .http
        .get(s.url("/api/progress"))
        .bearer_auth("wrong")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);

    let r = s
        .http
        .get(s.url("/api/progress"))
        .bearer_auth("sesame")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
}

#[tokio::test]
async fn tasks_are_not_handed_out_twice_while_leased() {
    let s = start(None).await;
    s.ingest(&["p1", "p2", "p3"]).await;
    for who in ["a", "b", "c", "d", "e", "f", "g"] {
        s.register(who).await;
    }
    // Three pairs, two initial slots each: six leases, then nothing.
    let mut handed = Vec::new();
    for who in ["a", "b", "c", "d", "e", "f"] {
        let t: Value = s.next(who).await.json().await.unwrap();
        handed.push(t["pair_id"].as_str().unwrap().to_owned());
    }
    assert_eq!(s.next("g").await.status(), StatusCode::NO_CONTENT);
    let distinct: BTreeSet<_> = handed.iter().collect();
    assert_eq!(distinct.len(), 3);
}
