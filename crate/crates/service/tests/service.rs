use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Instant;

use futures_util::{SinkExt, StreamExt};
use protores::checkpoint::save_checkpoint;
use protores::model::{Model, ModelConfig};
use protores::SkeletonSpec;
use protores_service::*;
use tokio_tungstenite::tungstenite::Message;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::protores(5);
    c.width = 32;
    c.embedding_width = 32;
    c.embedding_dim = 8;
    c.encoder_blocks = 2;
    c.gpd_blocks = 1;
    c.ikd_blocks = 1;
    c.layers_per_block = 2;
    c
}

/// Writes the pinned checkpoint and response. Only runs when
/// PROTORES_UPDATE_GOLDEN is set; the files are checked in.
fn maybe_regenerate() {
    if std::env::var_os("PROTORES_UPDATE_GOLDEN").is_none() {
        return;
    }
    let model = Model::new(tiny_config(), 7).unwrap();
    let meta = BTreeMap::from([("skeleton".to_string(), "minimal5".to_string())]);
    save_checkpoint(&model, &meta, fixtures().join("tiny.prck")).unwrap();
    let registry = golden_registry();
    let response = registry.solve(&golden_request()).unwrap();
    std::fs::write(fixtures().join("golden_response.json"), serde_json::to_string(&response).unwrap() + "\n").unwrap();
}

fn golden_registry() -> Registry {
    Registry::new([LoadedModel::load("tiny", &fixtures().join("tiny.prck"), None).unwrap()])
}

fn golden_request() -> SolveRequest {
    serde_json::from_slice(&std::fs::read(fixtures().join("golden_request.json")).unwrap()).unwrap()
}

fn golden_bytes() -> String {
    maybe_regenerate();
    std::fs::read_to_string(fixtures().join("golden_response.json")).unwrap()
}

async fn start(registry: Registry) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(registry, 2)).await.unwrap() });
    addr
}

#[test]
fn golden_solve_is_byte_identical() {
    let golden = golden_bytes();
    let response = golden_registry().solve(&golden_request()).unwrap();
    assert_eq!(serde_json::to_string(&response).unwrap() + "\n", golden);
}

#[tokio::test]
async fn golden_over_http() {
    let golden = golden_bytes();
    let addr = start(golden_registry()).await;
    let body = std::fs::read(fixtures().join("golden_request.json")).unwrap();
    let res = reqwest::Client::new()
        .post(format!("http://{addr}/v1/solve"))
        .header("content-type", "application/json")
        .body(body)
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 200);
    assert_eq!(res.text().await.unwrap(), golden.trim_end());
}

#[test]
fn global_positions_match_fk_of_returned_pose() {
    let registry = golden_registry();
    let skel = SkeletonSpec::minimal();
    for format in [RotationFormat::Quaternion, RotationFormat::Sixd] {
        let mut req = golden_request();
        req.options.rotation_format = format;
        let res = registry.solve(&req).unwrap();
        let pose = res.pose().unwrap();
        pose.validate(&skel, 1e-5).unwrap();
        let g = pose.global_transforms(&skel).unwrap();
        for (a, b) in g.positions.iter().zip(res.global_positions.as_ref().unwrap()) {
            for k in 0..3 {
                assert!((a[k] - b[k] as f64).abs() < 1e-5);
            }
        }
        assert_eq!(registry.solve(&req).unwrap(), res);
    }
}

#[tokio::test]
async fn http_errors() {
    let addr = start(golden_registry()).await;
    let client = reqwest::Client::new();
    let post = |body: serde_json::Value| client.post(format!("http://{addr}/v1/solve")).json(&body).send();

    let mut dup = serde_json::to_value(golden_request()).unwrap();
    let first = dup["effectors"][0].clone();
    dup["effectors"].as_array_mut().unwrap().push(first);
    let res = post(dup).await.unwrap();
    assert_eq!(res.status(), 400);
    let body: ErrorBody = res.json().await.unwrap();
    assert_eq!(body.path.as_deref(), Some("effectors[4]"));

    let mut unknown = serde_json::to_value(golden_request()).unwrap();
    unknown["model"] = "nope".into();
    assert_eq!(post(unknown).await.unwrap().status(), 404);

    let mut bad_joint = serde_json::to_value(golden_request()).unwrap();
    bad_joint["effectors"][1]["joint"] = "Tail".into();
    let res = post(bad_joint).await.unwrap();
    assert_eq!(res.status(), 400);
    assert_eq!(res.json::<ErrorBody>().await.unwrap().path.as_deref(), Some("effectors[1].joint"));

    let empty = serde_json::json!({"effectors": []});
    assert_eq!(post(empty).await.unwrap().status(), 400);
}

#[tokio::test]
async fn health_and_skeletons() {
    let addr = start(golden_registry()).await;
    let health: Health = reqwest::get(format!("http://{addr}/v1/health")).await.unwrap().json().await.unwrap();
    assert_eq!(health.status, "ok");
    assert_eq!(health.models, vec!["tiny".to_string()]);
    for id in ["tiny", "minimal5"] {
        let text = reqwest::get(format!("http://{addr}/v1/skeletons/{id}")).await.unwrap().text().await.unwrap();
        assert_eq!(SkeletonSpec::from_json(&text).unwrap(), SkeletonSpec::minimal());
    }
    assert_eq!(reqwest::get(format!("http://{addr}/v1/skeletons/other")).await.unwrap().status(), 404);
}

fn with_id(id: u64) -> String {
    let mut r = golden_request();
    r.request_id = Some(id);
    serde_json::to_string(&r).unwrap()
}

#[tokio::test]
async fn stream_answers_in_order() {
    let addr = start(golden_registry()).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/v1/stream")).await.unwrap();
    for id in 1..=3 {
        ws.send(Message::Text(with_id(id).into())).await.unwrap();
        let msg = ws.next().await.unwrap().unwrap();
        let res: SolveResponse = serde_json::from_str(msg.to_text().unwrap()).unwrap();
        assert_eq!(res.request_id, Some(id));
    }
    ws.send(Message::Text("{not json".into())).await.unwrap();
    let err: ErrorBody = serde_json::from_str(ws.next().await.unwrap().unwrap().to_text().unwrap()).unwrap();
    assert_eq!(err.path.as_deref(), Some("body"));
}

fn desk_registry(width: usize) -> Registry {
    let mut c = ModelConfig::protores(64);
    c.width = width;
    c.embedding_width = width;
    Registry::new([LoadedModel::new("desk", Model::new(c, 1).unwrap(), SkeletonSpec::humanoid()).unwrap()])
}

fn desk_request(id: u64) -> String {
    serde_json::json!({
        "request_id": id,
        "effectors": [
            {"joint": "HandLeft", "type": "position", "data": [0.5, 1.2, 0.1, 0, 0, 0], "tolerance": 0.0},
            {"joint": "HandRight", "type": "position", "data": [-0.5, 1.3, 0.2, 0, 0, 0], "tolerance": 0.1},
            {"joint": "FootLeft", "type": "position", "data": [0.1, 0.0, 0.0, 0, 0, 0], "tolerance": 0.0},
            {"joint": "Head", "type": "lookat", "data": [0.0, 1.6, 3.0, 0, 0, 1], "tolerance": 0.2}
        ]
    })
    .to_string()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn burst_coalesces_to_the_final_request() {
    let addr = start(desk_registry(256)).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/v1/stream")).await.unwrap();
    for id in 1..=100 {
        ws.send(Message::Text(desk_request(id).into())).await.unwrap();
    }
    let mut seen = Vec::new();
    while seen.last() != Some(&100) {
        let msg = ws.next().await.unwrap().unwrap();
        let res: SolveResponse = serde_json::from_str(msg.to_text().unwrap()).unwrap();
        seen.push(res.request_id.unwrap());
    }
    assert!(seen.windows(2).all(|w| w[0] < w[1]), "responses out of order: {seen:?}");
    assert!(seen.len() <= 100);
    println!("100-request burst answered with {} responses", seen.len());
}

#[test]
fn desk_scale_p99_latency() {
    let registry = desk_registry(256);
    let requests: Vec<SolveRequest> = (0..220).map(|i| serde_json::from_str(&desk_request(i)).unwrap()).collect();
    let mut times: Vec<f64> = requests
        .iter()
        .map(|r| {
            let t = Instant::now();
            registry.solve(r).unwrap();
            t.elapsed().as_secs_f64() * 1e3
        })
        .skip(20)
        .collect();
    times.sort_by(f64::total_cmp);
    let p99 = times[(times.len() * 99).div_ceil(100) - 1];
    println!("p99 solve latency at width 256: {p99:.2} ms");
    assert!(p99 < 50.0);
}

#[test]
fn startup_errors_are_clear() {
    let err = ServeConfig::default().load_registry().unwrap_err().to_string();
    assert!(err.contains("PROTORES_CHECKPOINT"), "{err}");
    let cfg = ServeConfig::default().with_env([("PROTORES_CHECKPOINT".to_string(), "/nonexistent/x.prck".to_string())]);
    let err = cfg.load_registry().unwrap_err().to_string();
    assert!(err.contains("/nonexistent/x.prck"), "{err}");
    let cfg = ServeConfig::default().with_env([("PROTORES_BIND".to_string(), "0.0.0.0:9".to_string())]);
    assert_eq!(cfg.bind, "0.0.0.0:9");
}
