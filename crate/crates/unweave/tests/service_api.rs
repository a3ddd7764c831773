use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use unweave::io::StoryRecord;
use unweave::service::{router, AppState, LogEntry};

fn pool(n: usize, clips: usize) -> Vec<StoryRecord> {
    (0..n)
        .map(|i| StoryRecord {
            id: format!("s{i}"),
            clips: (0..clips).map(|k| vec![k as f64, (i + 1) as f64, 1.0]).collect(),
            ground_truth: None,
            provenance: Default::default(),
            display: None,
        })
        .collect()
}

fn app(stories: Vec<StoryRecord>, log: &Path) -> Router {
    router(Arc::new(AppState::open(stories, log, 7).unwrap()), None)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/annotations")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

const PARTITION: [usize; 10] = [0, 0, 0, 1, 2, 2, 2, 2, 2, 2];

#[tokio::test]
async fn partition_round_trips_through_post_and_get() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ann.jsonl");
    let app = app(pool(1, 10), &log);
    let (st, story) = get(&app, "/api/next?annotator=ana").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(story["id"], "s0");
    assert_eq!(story["clips"].as_array().unwrap().len(), 10);
    assert!(story["clips"][3]["xy"].is_array());

    let (st, rec) = post(&app, json!({"story_id": "s0", "annotator": "ana", "assignment": PARTITION})).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(rec["assignment"], json!(PARTITION));

    let (st, view) = get(&app, "/api/stories/s0").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(view["annotation"]["assignment"], json!(PARTITION));
    assert_eq!(view["annotation"]["annotator"], "ana");

    // a fresh process over the same log serves the identical annotation
    let reloaded = self::app(pool(1, 10), &log);
    let (_, again) = get(&reloaded, "/api/stories/s0").await;
    assert_eq!(again, view);
}

#[tokio::test]
async fn track_form_is_accepted_and_reordering_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(pool(2, 10), &dir.path().join("a.jsonl"));
    let (st, body) = post(
        &app,
        json!({"story_id": "s0", "annotator": "ana", "threads": [[0, 2, 1], [3], [4, 5, 6, 7, 8, 9]]}),
    )
    .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("reorders"));

    let (st, _) = post(
        &app,
        json!({"story_id": "s0", "annotator": "ana", "assignment": [1, 1, 0, 0, 0, 0, 0, 0, 0, 0]}),
    )
    .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);

    let (st, rec) = post(
        &app,
        json!({"story_id": "s0", "annotator": "ana", "threads": [[0, 1, 2], [3], [4, 5, 6, 7, 8, 9]]}),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(rec["assignment"], json!(PARTITION));
}

#[tokio::test]
async fn malformed_and_unknown_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(pool(1, 4), &dir.path().join("a.jsonl"));
    let req = Request::post("/api/annotations")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(call(&app, req).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = post(&app, json!({"story_id": "s0", "annotator": "ana", "assignment": [0, 0]})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = post(&app, json!({"story_id": "s0", "annotator": "ana", "bogus": 1})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = post(&app, json!({"story_id": "nope", "annotator": "ana", "assignment": [0]})).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/stories/nope").await.0, StatusCode::NOT_FOUND);
    let (st, _) = post(&app, json!({"story_id": "s0", "annotator": " ", "assignment": [0, 0, 0, 0]})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn second_submission_and_foreign_holder_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(pool(2, 3), &dir.path().join("a.jsonl"));
    let (_, served) = get(&app, "/api/next?annotator=ana").await;
    let id = served["id"].as_str().unwrap().to_string();
    let (st, _) = post(&app, json!({"story_id": id, "annotator": "bo", "assignment": [0, 0, 0]})).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = post(&app, json!({"story_id": id, "annotator": "ana", "assignment": [0, 1, 0]})).await;
    assert_eq!(st, StatusCode::CREATED);
    let (st, _) = post(&app, json!({"story_id": id, "annotator": "ana", "assignment": [0, 0, 0]})).await;
    assert_eq!(st, StatusCode::CONFLICT);
}

#[tokio::test]
async fn held_story_is_reserved_until_submitted() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(pool(2, 3), &dir.path().join("a.jsonl"));
    let (_, a1) = get(&app, "/api/next?annotator=ana").await;
    let (_, a2) = get(&app, "/api/next?annotator=ana").await;
    assert_eq!(a1["id"], a2["id"]);
    let (_, b) = get(&app, "/api/next?annotator=bo").await;
    assert_ne!(a1["id"], b["id"]);
    // both stories are held, so a third annotator gets nothing
    assert_eq!(get(&app, "/api/next?annotator=cy").await.0, StatusCode::NO_CONTENT);
    assert_eq!(get(&app, "/api/next?annotator=").await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn skipped_story_goes_to_someone_else() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(pool(1, 3), &dir.path().join("a.jsonl"));
    let (_, s) = get(&app, "/api/next?annotator=ana").await;
    let (st, rec) = post(&app, json!({"story_id": s["id"], "annotator": "ana", "skipped": true})).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(rec["skipped"], true);
    assert!(rec.get("assignment").is_none());
    assert_eq!(get(&app, "/api/next?annotator=ana").await.0, StatusCode::NO_CONTENT);
    let (st, again) = get(&app, "/api/next?annotator=bo").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(again["id"], s["id"]);
    let (st, _) = post(
        &app,
        json!({"story_id": s["id"], "annotator": "bo", "skipped": true, "assignment": [0, 0, 0]}),
    )
    .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn pool_exhaustion_gives_no_content() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(pool(3, 2), &dir.path().join("a.jsonl"));
    for _ in 0..3 {
        let (st, s) = get(&app, "/api/next?annotator=ana").await;
        assert_eq!(st, StatusCode::OK);
        let (st, _) = post(&app, json!({"story_id": s["id"], "annotator": "ana", "assignment": [0, 1]})).await;
        assert_eq!(st, StatusCode::CREATED);
    }
    assert_eq!(get(&app, "/api/next?annotator=ana").await.0, StatusCode::NO_CONTENT);
    let (_, h) = get(&app, "/healthz").await;
    assert_eq!(h["status"], "ok");
    assert_eq!(h["stories"], 3);
    assert_eq!(h["annotated"], 3);
    assert_eq!(h["assigned"], 0);
}

#[tokio::test]
async fn restart_replays_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("nested").join("a.jsonl");
    let first = app(pool(3, 2), &log);
    let (_, held) = get(&first, "/api/next?annotator=ana").await;
    let (_, done) = get(&first, "/api/next?annotator=bo").await;
    post(&first, json!({"story_id": done["id"], "annotator": "bo", "assignment": [0, 0]})).await;
    drop(first);

    let lines: Vec<LogEntry> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);

    let second = app(pool(3, 2), &log);
    let (_, h) = get(&second, "/healthz").await;
    assert_eq!((h["annotated"].as_u64(), h["assigned"].as_u64()), (Some(1), Some(1)));
    // the held story is re-served to its holder after a restart
    let (_, again) = get(&second, "/api/next?annotator=ana").await;
    assert_eq!(again["id"], held["id"]);
    let (_, v) = get(&second, &format!("/api/stories/{}", done["id"].as_str().unwrap())).await;
    assert_eq!(v["annotation"]["assignment"], json!([0, 0]));
}

#[test]
fn log_naming_an_unknown_story_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("a.jsonl");
    std::fs::write(
        &log,
        "{\"kind\":\"served\",\"story_id\":\"ghost\",\"annotator\":\"a\",\"timestamp_ms\":1}\n",
    )
    .unwrap();
    assert!(AppState::open(pool(1, 2), &log, 0).is_err());
    let mut dup = pool(2, 2);
    dup[1].id = "s0".into();
    assert!(AppState::open(dup, &dir.path().join("b.jsonl"), 0).is_err());
}

#[tokio::test]
async fn static_files_are_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>hi</p>").unwrap();
    let state = Arc::new(AppState::open(pool(1, 2), &dir.path().join("a.jsonl"), 0).unwrap());
    let app = router(state, Some(dir.path().to_path_buf()));
    let resp = app.oneshot(Request::get("/index.html").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<p>hi</p>");
}
