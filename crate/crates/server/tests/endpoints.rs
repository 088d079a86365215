use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use contrastaug_core::human_eval::{
    agreement_stats, AnnotationSession, Condition, SessionItem, SessionStore,
};
use contrastaug_server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn session(n: usize) -> AnnotationSession {
    AnnotationSession {
        id: "pilot".into(),
        condition: Condition::RealTarget,
        items: (0..n)
            .map(|i| SessionItem {
                image: format!("img{i}"),
                feature: format!("feat{i}"),
                image_path: format!("birds/{i}.png"),
                feature_text: "red crest".into(),
                concept: "birds".into(),
            })
            .collect(),
        annotators: vec!["a1".into(), "a2".into(), "a3".into()],
        seed: 3,
        show_concept: false,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    state: AppState,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir_all(corpus.join("birds")).unwrap();
    for i in 0..n {
        std::fs::write(corpus.join(format!("birds/{i}.png")), b"\x89PNG\r\n\x1a\nfake").unwrap();
    }
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>annotate</html>").unwrap();
    let store = SessionStore::new(dir.path().join("sessions"));
    store.create(&session(n)).unwrap();
    Fixture { state: AppState { store: Arc::new(store), corpus, ui_dir: Some(ui) }, _dir: dir }
}

async fn send(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn session_metadata_and_items() {
    let f = fixture(4);
    let (status, body) = send(&f.state, "GET", "/session/pilot", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    assert_eq!(v["items"].as_array().unwrap().len(), 4);
    assert_eq!(v["condition"], "real_target");
    assert_eq!(v["records"].as_array().unwrap().len(), 0);

    let (status, _) = send(&f.state, "GET", "/session/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn image_bytes_by_asset_id() {
    let f = fixture(2);
    let (status, body) = send(&f.state, "GET", "/item/img1/image", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.starts_with(b"\x89PNG"));
    let (status, _) = send(&f.state, "GET", "/item/nope/image", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn record_replay_conflict() {
    let f = fixture(2);
    let rec = json!({ "annotator": "a1", "item_index": 0, "judgment": "yes" });
    let (status, body) = send(&f.state, "POST", "/session/pilot/record", Some(rec.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(json_of(&body)["judgment"], "yes");

    let (status, _) = send(&f.state, "POST", "/session/pilot/record", Some(rec)).await;
    assert_eq!(status, StatusCode::OK);

    let conflict = json!({ "annotator": "a1", "item_index": 0, "judgment": "no" });
    let (status, body) = send(&f.state, "POST", "/session/pilot/record", Some(conflict)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(json_of(&body)["stored"], "yes");

    let bad = json!({ "annotator": "a1", "item_index": 9, "judgment": "no" });
    let (status, _) = send(&f.state, "POST", "/session/pilot/record", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (session, records) = f.state.store.load("pilot").unwrap();
    assert_eq!(session.items.len(), 2);
    assert_eq!(records.len(), 1);
}

#[tokio::test]
async fn stats_match_library_after_full_session() {
    let f = fixture(4);
    let (status, body) = send(&f.state, "GET", "/session/pilot/stats", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(json_of(&body)["incomplete_items"].as_array().unwrap().len(), 4);

    // Every item gets two yes and one no.
    for item in 0..4 {
        for (annotator, judgment) in [("a1", "yes"), ("a2", "yes"), ("a3", "no")] {
            let rec = json!({ "annotator": annotator, "item_index": item, "judgment": judgment });
            let (status, _) = send(&f.state, "POST", "/session/pilot/record", Some(rec)).await;
            assert_eq!(status, StatusCode::CREATED);
        }
    }
    let (status, body) = send(&f.state, "GET", "/session/pilot/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    assert!((v["fleiss_kappa"].as_f64().unwrap() + 0.5).abs() < 1e-12);
    let (session, records) = f.state.store.load("pilot").unwrap();
    let lib = agreement_stats(&session, &records).unwrap();
    assert_eq!(v["positive_rate"].as_f64().unwrap(), lib.positive_rate);
    assert_eq!(v["fleiss_kappa"].as_f64().unwrap(), lib.fleiss_kappa);
}

#[tokio::test]
async fn serves_ui_files_without_escaping_root() {
    let f = fixture(1);
    let (status, body) = send(&f.state, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>annotate</html>");
    let (status, _) = send(&f.state, "GET", "/../sessions/pilot.jsonl", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
