use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use aide_core::adapters::remote::{connect_all, RemoteAdapterConfig};
use aide_core::adapters::{AdapterKind, UsageMeter};
use aide_core::error::Error;
use aide_core::geometry::BoundingBox;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

#[derive(Default)]
struct Mock {
    hits: Mutex<HashMap<String, usize>>,
    flaky_left: AtomicUsize,
    last_auth: Mutex<Option<String>>,
}

impl Mock {
    fn hit(&self, key: &str) {
        *self.hits.lock().unwrap().entry(key.to_string()).or_default() += 1;
    }

    fn count(&self, key: &str) -> usize {
        self.hits.lock().unwrap().get(key).copied().unwrap_or(0)
    }
}

type S = State<Arc<Mock>>;

async fn caption(State(m): S, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let id = body["image_id"].as_str().unwrap_or("").to_string();
    m.hit(&id);
    *m.last_auth.lock().unwrap() = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
    match id.as_str() {
        "down" => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({}))),
        "forbidden" => (StatusCode::FORBIDDEN, Json(json!({}))),
        "flaky" if m.flaky_left.load(Ordering::SeqCst) > 0 => {
            m.flaky_left.fetch_sub(1, Ordering::SeqCst);
            (StatusCode::TOO_MANY_REQUESTS, Json(json!({})))
        }
        _ => (StatusCode::OK, Json(json!({"caption": format!("An image with a trailer ({id})")}))),
    }
}

async fn embed(Json(body): Json<Value>) -> Json<Value> {
    if body["payload"] == "short" {
        return Json(json!({"vector": [1.0, 0.0]}));
    }
    let first = if body["kind"] == "text" { 1.0 } else { 0.5 };
    Json(json!({"vector": [first, 0.0, 0.0, 1.0]}))
}

async fn propose(Json(body): Json<Value>) -> Json<Value> {
    let label = body["prompts"][0].clone();
    Json(json!({"boxes": [{"x_min": 1.0, "y_min": 2.0, "x_max": 30.0, "y_max": 40.0, "score": 0.8, "label": label}]}))
}

async fn classify(Json(body): Json<Value>) -> Json<Value> {
    let n = body["labels"].as_array().unwrap().len();
    if body["image_id"] == "bad" {
        return Json(json!({"scores": vec![0.5; n + 1]}));
    }
    let mut scores = vec![0.0; n];
    scores[0] = 1.0;
    Json(json!({"scores": scores}))
}

async fn scenarios(Json(body): Json<Value>) -> Json<Value> {
    let cat = body["category"].as_str().unwrap().to_string();
    let prompt = body["prompt"].as_str().unwrap();
    assert!(prompt.contains(&cat));
    let n = body["n"].as_u64().unwrap();
    Json(json!({"descriptions": (0..n).map(|i| format!("A {cat} in scene {i}.")).collect::<Vec<_>>()}))
}

fn start(mock: Arc<Mock>) -> String {
    let app = Router::new()
        .route("/meta", get(|| async { Json(json!({"dimension": 4})) }))
        .route("/caption", post(caption))
        .route("/embed", post(embed))
        .route("/propose", post(propose))
        .route("/classify", post(classify))
        .route("/scenarios", post(scenarios))
        .with_state(mock);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn config(base_url: String) -> RemoteAdapterConfig {
    RemoteAdapterConfig {
        base_url,
        timeout_secs: 5.0,
        retries: 3,
        token_env: None,
        backoff_ms: 1,
    }
}

#[test]
fn adapters_speak_the_wire_protocol() {
    let mock = Arc::new(Mock::default());
    let base = start(mock.clone());
    let meter = Arc::new(UsageMeter::new());
    let set = connect_all(config(base), meter.clone()).unwrap();

    assert_eq!(set.embedder.dimension(), 4);
    assert_eq!(set.captioner.describe("img-1").unwrap(), "An image with a trailer (img-1)");
    assert_eq!(set.embedder.embed_text("trailer").unwrap().values(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(set.embedder.embed_image("img-1").unwrap().values()[0], 0.5);
    assert!(matches!(
        set.embedder.embed_text("short"),
        Err(Error::DimensionMismatch { expected: 4, actual: 2 })
    ));

    let props = set.proposer.propose("img-1", &["trailer".into(), "car".into()]).unwrap();
    assert_eq!(props.len(), 1);
    assert_eq!(props[0].label, "trailer");

    let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let labels = vec!["trailer".to_string(), "background".to_string()];
    assert_eq!(set.classifier.classify("img-1", &b, &labels).unwrap(), vec![1.0, 0.0]);
    assert!(matches!(set.classifier.classify("bad", &b, &labels), Err(Error::AdapterUnavailable { .. })));

    let texts = set.scenarios.generate("trailer", 3).unwrap();
    assert_eq!(texts.len(), 3);

    let usage = meter.snapshot();
    assert_eq!(usage[&AdapterKind::Captioner].calls, 1);
    assert!(usage[&AdapterKind::Embedder].calls >= 3);
}

#[test]
fn transient_failures_are_retried_exactly_retries_times() {
    let mock = Arc::new(Mock::default());
    let base = start(mock.clone());
    let set = connect_all(config(base), Arc::new(UsageMeter::new())).unwrap();

    mock.flaky_left.store(2, Ordering::SeqCst);
    set.captioner.describe("flaky").unwrap();
    assert_eq!(mock.count("flaky"), 3);

    let err = set.captioner.describe("down").unwrap_err();
    assert!(matches!(err, Error::AdapterUnavailable { .. }), "{err}");
    assert_eq!(mock.count("down"), 4);

    // client errors are not retried
    assert!(set.captioner.describe("forbidden").is_err());
    assert_eq!(mock.count("forbidden"), 1);
}

#[test]
fn bearer_token_comes_from_the_named_variable() {
    let mock = Arc::new(Mock::default());
    let base = start(mock.clone());
    let var = "AIDE_REMOTE_TEST_TOKEN";
    // only this test touches the variable
    std::env::set_var(var, "s3cret");
    let mut cfg = config(base);
    cfg.token_env = Some(var.into());
    let set = connect_all(cfg, Arc::new(UsageMeter::new())).unwrap();
    set.captioner.describe("img-2").unwrap();
    assert_eq!(mock.last_auth.lock().unwrap().as_deref(), Some("Bearer s3cret"));
}

#[test]
fn unreachable_service_is_unavailable() {
    let mut cfg = config("http://127.0.0.1:9".into());
    cfg.retries = 1;
    let err = connect_all(cfg, Arc::new(UsageMeter::new())).err().unwrap();
    assert!(matches!(err, Error::AdapterUnavailable { .. }), "{err}");
}
