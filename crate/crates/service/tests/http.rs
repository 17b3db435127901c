use std::io::{Cursor, Write};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use hedgefilter::detect::{Detector, HedgeMode, TauInit};
use hedgefilter::record::{InputRecord, StreamRecord};
use hedgefilter::{
    FamilyModel, FeasibleBox, FilterState, HedgeState, NoisyChannel, NoisyMirrorDescent, StepSchedule, ZetaTransform,
};
use hedgefilter_service::{
    feed_lines, feed_records, router, spawn, FeedbackAck, QueriesResponse, ServiceHandle, ServiceOptions,
};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tower::ServiceExt;

/// ζ is the belief itself, so every step starts out nominal against τ = 0 and η = 0.1.
fn detector() -> Detector {
    let model = FamilyModel::bernoulli(2).unwrap();
    let bx = model.certify_box(&FeasibleBox::uniform(2, -3.0, 3.0).unwrap()).unwrap();
    let state = FilterState::new(model, bx, StepSchedule::InverseSqrtT, None).unwrap();
    let filter = NoisyMirrorDescent::new(state, NoisyChannel::Identity).unwrap();
    let hedge = HedgeState::for_horizon(0.0, 1.0, 100).unwrap();
    Detector::new(filter, hedge, ZetaTransform::linear_with_log_scale(0.0).unwrap(), TauInit::Min).unwrap()
}

fn options(policy: HedgeMode) -> ServiceOptions {
    ServiceOptions { policy, timeout: Duration::from_secs(30), window: 5, seed: 7, log_path: None }
}

fn inputs(n: usize) -> Vec<InputRecord> {
    (0..n).map(|i| InputRecord { z: vec![(i % 2) as f64, 1.0], y: None, x: None }).collect()
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let res = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn post(app: &Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/feedback")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn records(app: &Router, since: u64) -> Vec<StreamRecord> {
    serde_json::from_value(get(app, &format!("/state?since={since}")).await.1).unwrap()
}

async fn pending(app: &Router) -> QueriesResponse {
    serde_json::from_value(get(app, "/queries").await.1).unwrap()
}

async fn wait_for<F, Fut>(mut done: F)
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    for _ in 0..2000 {
        if done().await {
            return;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("condition not reached");
}

async fn start(policy: HedgeMode, n: usize) -> (ServiceHandle, Router) {
    let (handle, _) = spawn(detector(), options(policy), feed_records(inputs(n)), None).unwrap();
    let app = router(handle.clone());
    (handle, app)
}

#[tokio::test]
async fn state_filters_by_timestep() {
    let (_handle, app) = start(HedgeMode::Arbitrary, 3).await;
    wait_for(|| async { records(&app, 0).await.len() == 3 }).await;
    let all = records(&app, 0).await;
    assert_eq!(all.iter().map(|r| r.t).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(records(&app, 1).await.iter().map(|r| r.t).collect::<Vec<_>>(), vec![2, 3]);
    assert!(records(&app, 3).await.is_empty());
    assert!(records(&app, 50).await.is_empty());
    let (status, body) = get(&app, "/state").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body.as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn queried_step_blocks_until_answered() {
    let (_handle, app) = start(HedgeMode::Full, 3).await;
    wait_for(|| async { !pending(&app).await.queries.is_empty() }).await;
    let q = pending(&app).await;
    assert_eq!(q.mode, HedgeMode::Full);
    assert_eq!(q.queries.len(), 1);
    let query = &q.queries[0];
    assert_eq!((query.id, query.t, query.tau), (1, 1, 0.0));
    assert_eq!(query.z.dim, 2);
    assert!(query.deadline > query.created_at);
    // Detection is paused: nothing emitted yet.
    assert!(records(&app, 0).await.is_empty());

    // Missed anomaly: the threshold rises by η.
    let (status, body) = post(&app, json!({"id": 1, "y": 1, "submitter": "test"})).await;
    assert_eq!(status, StatusCode::OK);
    let ack: FeedbackAck = serde_json::from_value(body).unwrap();
    assert!(ack.applied && ack.moved);
    assert_eq!(ack.t, 1);
    assert!((ack.tau - 0.1).abs() < 1e-15);

    let (status, body) = post(&app, json!({"id": 1, "y": 1})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["kind"], "duplicate_query");

    wait_for(|| async { pending(&app).await.queries.first().is_some_and(|q| q.id == 2) }).await;
    let next = pending(&app).await.queries[0].clone();
    assert_eq!(next.t, 2);
    assert!((next.tau - 0.1).abs() < 1e-15, "duplicate must not move the threshold");

    let first = records(&app, 0).await;
    assert_eq!(first.len(), 1);
    assert!(first[0].queried);
    assert_eq!(first[0].feedback.map(|y| y.as_i8()), Some(1));
}

#[tokio::test]
async fn invalid_submissions_are_rejected() {
    let (handle, app) = start(HedgeMode::Full, 2).await;
    wait_for(|| async { !pending(&app).await.queries.is_empty() }).await;
    let (status, body) = post(&app, json!({"id": 1, "y": 0})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["kind"], "invalid_label");
    assert!(body["error"].as_str().unwrap().contains("-1 or +1"));
    let (status, _) = post(&app, json!({"id": 99, "y": -1})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = post(&app, json!({"t": 1, "y": -1})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = post(&app, json!({"id": 1})).await;
    assert!(status.is_client_error());
    // The query is still open and unaffected.
    let q = pending(&app).await;
    assert_eq!(q.queries[0].id, 1);
    let stats = handle.stats().await.unwrap();
    assert_eq!((stats.accepted, stats.updates, stats.rejected), (0, 0, 3));
}

#[tokio::test]
async fn unanswered_queries_expire_without_update() {
    let mut opts = options(HedgeMode::Full);
    opts.timeout = Duration::from_millis(40);
    let (handle, _) = spawn(detector(), opts, feed_records(inputs(2)), None).unwrap();
    let app = router(handle.clone());
    wait_for(|| async { records(&app, 0).await.len() == 2 }).await;
    let recs = records(&app, 0).await;
    assert!(recs.iter().all(|r| r.queried && r.feedback.is_none()));
    assert_eq!(recs[1].tau, 0.0);
    assert!(pending(&app).await.queries.is_empty());
    let (status, body) = post(&app, json!({"id": 1, "y": 1})).await;
    assert_eq!(status, StatusCode::GONE);
    assert_eq!(body["kind"], "expired");
    assert_eq!(handle.stats().await.unwrap().expired, 2);
}

#[tokio::test]
async fn label_efficient_loop_with_answers() {
    let (handle, app) = start(HedgeMode::LabelEfficient, 20).await;
    let mut answered = 0;
    for _ in 0..4000 {
        if records(&app, 0).await.len() == 20 {
            break;
        }
        if let Some(q) = pending(&app).await.queries.first() {
            let (status, _) = post(&app, json!({"id": q.id, "y": -1})).await;
            assert_eq!(status, StatusCode::OK);
            answered += 1;
        }
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    let recs = records(&app, 0).await;
    assert_eq!(recs.len(), 20);
    let stats = handle.stats().await.unwrap();
    assert_eq!(recs.iter().filter(|r| r.queried).count() as u64, stats.queries);
    assert_eq!(stats.updates, answered);
    assert_eq!(stats.queries, answered);
    assert!(recs.iter().all(|r| r.queried == r.feedback.is_some()));
}

#[tokio::test]
async fn arbitrary_feedback_is_applied_exactly_once() {
    let (handle, app) = start(HedgeMode::Arbitrary, 10).await;
    wait_for(|| async { records(&app, 0).await.len() == 10 }).await;
    let q = pending(&app).await;
    assert_eq!(q.mode, HedgeMode::Arbitrary);
    assert!(q.queries.is_empty());

    let mut tau = 0.0;
    for t in 6..=10 {
        let (status, body) = post(&app, json!({"t": t, "y": 1})).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let ack: FeedbackAck = serde_json::from_value(body).unwrap();
        assert!(ack.moved);
        tau = (tau + 0.1f64).min(1.0);
        assert!((ack.tau - tau).abs() < 1e-12);
    }
    for t in [6, 10] {
        let (status, _) = post(&app, json!({"t": t, "y": 1})).await;
        assert_eq!(status, StatusCode::CONFLICT);
    }
    for t in [0, 5, 11] {
        let (status, body) = post(&app, json!({"t": t, "y": 1})).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_eq!(body["kind"], "outside_window");
    }
    let stats = handle.stats().await.unwrap();
    assert_eq!((stats.accepted, stats.updates, stats.rejected), (5, 5, 5));
    // Emitted records are never rewritten by late feedback.
    assert!(records(&app, 0).await.iter().all(|r| r.feedback.is_none() && r.tau == 0.0));
}

#[derive(Clone, Default)]
struct Shared(Arc<Mutex<Vec<u8>>>);

impl Write for Shared {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[tokio::test]
async fn bad_lines_become_error_records_and_everything_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = options(HedgeMode::Arbitrary);
    opts.log_path = Some(dir.path().join("service.jsonl"));
    let text = "{\"z\":[1,0]}\nnot json\n{\"z\":[1,0,1]}\n\n{\"z\":[0,0]}\n";
    let out = Shared::default();
    let (handle, _) =
        spawn(detector(), opts.clone(), feed_lines(Cursor::new(text)), Some(Box::new(out.clone()))).unwrap();
    let app = router(handle.clone());
    wait_for(|| async { records(&app, 0).await.len() == 2 }).await;
    post(&app, json!({"t": 2, "y": -1})).await;
    drop(app);
    let stats = handle.stats().await.unwrap();
    assert_eq!((stats.records, stats.errors), (2, 2));

    let emitted = String::from_utf8(out.0.lock().unwrap().clone()).unwrap();
    let lines: Vec<Value> = emitted.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["t"], 1);
    assert_eq!(lines[1]["line"], 2);
    assert_eq!(lines[2]["line"], 3);
    assert_eq!(lines[3]["t"], 2);

    let log = std::fs::read_to_string(opts.log_path.as_ref().unwrap()).unwrap();
    let kinds: Vec<String> =
        log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string()).collect();
    assert_eq!(kinds, ["record", "error", "error", "record", "submission"]);
}

#[tokio::test]
async fn serves_over_a_socket() {
    let (handle, _) = spawn(detector(), options(HedgeMode::Arbitrary), feed_records(inputs(2)), None).unwrap();
    wait_for(|| async { handle.state(0).await.len() == 2 }).await;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(hedgefilter_service::serve(listener, handle.clone()));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream.write_all(b"GET /state?since=1 HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).await.unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let body = response.split("\r\n\r\n").nth(1).unwrap();
    let recs: Vec<StreamRecord> = serde_json::from_str(body).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].t, 2);
}
