use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use std::sync::Arc;
use talkface_study::service::{router, SessionView, StudyService};
use talkface_study::{read_records, Criterion, RecordStore, StudyConfig};
use tower::ServiceExt;

struct Fixture {
    dir: tempfile::TempDir,
    app: axum::Router,
}

fn setup() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let videos = dir.path().join("videos");
    std::fs::create_dir_all(videos.join("seq1")).unwrap();
    std::fs::write(videos.join("seq1/GTS.mp4"), b"not really a video").unwrap();
    let store = RecordStore::open(dir.path().join("records.ndjson")).unwrap();
    let svc = StudyService::new(StudyConfig::default(), store).unwrap();
    let app = router(Arc::new(svc), Some(videos));
    Fixture { dir, app }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn json_call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn ratings(page: usize, scores: &[i64]) -> Value {
    json!({
        "page_index": page,
        "ratings": scores.iter().enumerate().map(|(slot, s)| json!({"slot": slot, "score": s})).collect::<Vec<_>>()
    })
}

/// Walks the protocol the browser client follows: 8 pages of 4 sliders,
/// muted first block, no going back, 32 records at the end.
#[tokio::test]
async fn full_participant_protocol() {
    let f = setup();
    let (s, v) = json_call(&f.app, "POST", "/sessions", Some(json!({"participant_id": "anna"}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let view: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(view.page_count, 8);
    for page in 0..8 {
        let (s, v) = json_call(&f.app, "GET", "/sessions/anna/page", None).await;
        assert_eq!(s, StatusCode::OK);
        let view: SessionView = serde_json::from_value(v.clone()).unwrap();
        let p = view.page.unwrap();
        assert_eq!(p.page_index, page);
        assert_eq!(p.videos.len(), 4);
        assert_eq!((p.scale_min, p.scale_max, p.scale_initial), (0, 100, 50));
        assert_eq!(p.muted, page < 4);
        assert_eq!(p.criterion == Criterion::Believability, page < 4);
        assert!(p.videos.iter().all(|x| x.muted == p.muted));
        assert!(!v.to_string().contains("\"condition\""), "condition leaked to client");
        assert!(!p.question.is_empty());

        let (s, _) = json_call(&f.app, "POST", "/sessions/anna/page", Some(ratings(page, &[0, 25, 75, 100]))).await;
        assert_eq!(s, StatusCode::OK);
        if page > 0 {
            let (s, v) = json_call(&f.app, "POST", "/sessions/anna/page", Some(ratings(page - 1, &[1, 1, 1, 1]))).await;
            assert_eq!(s, StatusCode::CONFLICT);
            assert!(v["error"].as_str().unwrap().contains("navigation locked"));
        }
    }
    let (_, v) = json_call(&f.app, "GET", "/sessions/anna/page", None).await;
    let view: SessionView = serde_json::from_value(v).unwrap();
    assert!(view.completed && view.page.is_none());
    assert_eq!(view.pages_done, 8);

    let records = read_records(&f.dir.path().join("records.ndjson")).unwrap();
    assert_eq!(records.len(), 32);

    let (s, body) = call(&f.app, "GET", "/records", None).await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    assert_eq!(text.lines().count(), 32);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["participant_id", "criterion", "sequence_id", "condition", "score"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[tokio::test]
async fn rejected_submissions_do_not_advance() {
    let f = setup();
    json_call(&f.app, "POST", "/sessions", Some(json!({"participant_id": "ben"}))).await;
    let (s, v) = json_call(&f.app, "POST", "/sessions/ben/page", Some(ratings(0, &[10, 20, 30]))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("missing"));
    let (s, _) = json_call(&f.app, "POST", "/sessions/ben/page", Some(ratings(0, &[10, 20, 30, 101]))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = json_call(&f.app, "POST", "/sessions/ben/page", Some(ratings(3, &[1, 2, 3, 4]))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, v) = json_call(&f.app, "GET", "/sessions/ben/page", None).await;
    assert_eq!(v["pages_done"], 0);
    let (s, body) = call(&f.app, "GET", "/records", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(body.is_empty());
}

#[tokio::test]
async fn unknown_session_and_bad_ids() {
    let f = setup();
    let (s, _) = json_call(&f.app, "GET", "/sessions/nobody/page", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&f.app, "POST", "/sessions", Some(json!({"participant_id": "../x"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn generated_ids_are_unique_and_resume_works() {
    let f = setup();
    let (_, a) = json_call(&f.app, "POST", "/sessions", None).await;
    let (_, b) = json_call(&f.app, "POST", "/sessions", Some(json!({}))).await;
    assert_ne!(a["participant_id"], b["participant_id"]);
    let id = a["participant_id"].as_str().unwrap().to_string();
    json_call(&f.app, "POST", &format!("/sessions/{id}/page"), Some(ratings(0, &[5, 5, 5, 5]))).await;
    let (s, again) = json_call(&f.app, "POST", "/sessions", Some(json!({"participant_id": id}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(again["pages_done"], 1);
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.ndjson");
    let cfg = StudyConfig { seed: 5, ..StudyConfig::default() };
    let first_page = {
        let svc = StudyService::new(cfg.clone(), RecordStore::open(&path).unwrap()).unwrap();
        let app = router(Arc::new(svc), None);
        let (_, v) = json_call(&app, "POST", "/sessions", Some(json!({"participant_id": "cara"}))).await;
        json_call(&app, "POST", "/sessions/cara/page", Some(ratings(0, &[1, 2, 3, 4]))).await;
        json_call(&app, "POST", "/sessions/cara/page", Some(ratings(1, &[1, 2, 3, 4]))).await;
        v["page"].clone()
    };
    let svc = StudyService::new(cfg.clone(), RecordStore::open(&path).unwrap()).unwrap();
    let app = router(Arc::new(svc), None);
    let (_, v) = json_call(&app, "GET", "/sessions/cara/page", None).await;
    assert_eq!(v["pages_done"], 2);
    let (s, _) = json_call(&app, "POST", "/sessions/cara/page", Some(ratings(0, &[1, 2, 3, 4]))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    // The rebuilt session shows the same order as before the restart.
    let fresh = talkface_study::create_session(&cfg, "cara", &mut talkface_study::session::participant_rng(5, "cara"));
    assert_eq!(first_page["videos"][0]["uri"], json!(fresh.pages[0].videos[0].uri));
}

#[tokio::test]
async fn report_and_videos() {
    let f = setup();
    for p in ["a1", "a2", "a3"] {
        json_call(&f.app, "POST", "/sessions", Some(json!({"participant_id": p}))).await;
        for page in 0..8 {
            let (s, _) = json_call(&f.app, "POST", &format!("/sessions/{p}/page"), Some(ratings(page, &[10, 40, 60, 90]))).await;
            assert_eq!(s, StatusCode::OK);
        }
    }
    json_call(&f.app, "POST", "/sessions", Some(json!({"participant_id": "partial"}))).await;
    json_call(&f.app, "POST", "/sessions/partial/page", Some(ratings(0, &[1, 1, 1, 1]))).await;

    let (s, v) = json_call(&f.app, "GET", "/report", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["participants_analyzed"], 3);
    assert_eq!(v["excluded_incomplete"], json!(["partial"]));
    assert_eq!(v["cells"].as_array().unwrap().len(), 8);
    assert!(v["note"].as_str().unwrap().contains("sphericity"));
    let (_, v) = json_call(&f.app, "GET", "/report?include_incomplete=true", None).await;
    assert_eq!(v["participants_analyzed"], 4);

    let (s, body) = call(&f.app, "GET", "/videos/seq1/GTS.mp4", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"not really a video");
    let (s, _) = call(&f.app, "GET", "/videos/seq9/GTS.mp4", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_participants() {
    let f = setup();
    let mut handles = Vec::new();
    for i in 0..6 {
        let app = f.app.clone();
        handles.push(tokio::spawn(async move {
            let id = format!("c{i}");
            json_call(&app, "POST", "/sessions", Some(json!({"participant_id": id}))).await;
            for page in 0..8 {
                let (s, _) = json_call(&app, "POST", &format!("/sessions/{id}/page"), Some(ratings(page, &[i, 2, 3, 4]))).await;
                assert_eq!(s, StatusCode::OK);
            }
        }));
    }
    for h in handles {
        h.await.unwrap();
    }
    let records = read_records(&f.dir.path().join("records.ndjson")).unwrap();
    assert_eq!(records.len(), 6 * 32);
}
