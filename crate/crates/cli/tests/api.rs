mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use common::{Fixture, RES};
use crg_cli::server::{router, AppState};
use crg_core::experiment::eyewear_reference_pairs;
use crg_core::image::ImageTensor;
use crg_core::models::{GeneratorModel, LatentGenerator, LatentVector};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(fx: &Fixture) -> Router {
    router(Arc::new(AppState::new(fx.ws.clone(), None)))
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(v.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, bytes) = send(app, method, uri, body).await;
    (s, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn b64_png(img: &ImageTensor) -> String {
    B64.encode(img.to_png().unwrap())
}

/// Register the eyewear direction from the first reference pair.
async fn eyewear_direction(app: &Router) -> String {
    let pairs = eyewear_reference_pairs(1, 9, RES).unwrap();
    let body = json!({
        "neutral_image": b64_png(&pairs[0].0),
        "attributed_image": b64_png(&pairs[0].1),
        "name": "eyewear",
    });
    let (s, v) = send_json(app, "POST", "/api/direction", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["direction_id"].as_str().unwrap().to_string()
}

fn source_z() -> Vec<f64> {
    vec![0.3, -0.2, 0.1, -1.0]
}

#[tokio::test]
async fn models_lists_the_pair() {
    let fx = Fixture::new();
    let (s, v) = send_json(&app(&fx), "GET", "/api/models", None).await;
    assert_eq!(s, StatusCode::OK);
    let models = v.as_array().unwrap();
    assert_eq!(models.len(), 1);
    assert_eq!(models[0]["id"], fx.encoder.as_str());
    assert_eq!(models[0]["generator"], fx.generator.as_str());
    assert_eq!(models[0]["latent_dim"], 4);
    assert_eq!(models[0]["resolution"], RES);
    assert_eq!(models[0]["encoder_digest"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn encode_returns_the_latent_and_rejects_bad_input() {
    let fx = Fixture::new();
    let app = app(&fx);
    let pairs = eyewear_reference_pairs(1, 9, RES).unwrap();
    let (s, v) = send_json(&app, "POST", "/api/encode", Some(json!({"image": b64_png(&pairs[0].1)}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let z = v["z"].as_array().unwrap();
    assert_eq!(z.len(), 4);
    // The attributed reference wears full eyewear: its last latent is far positive.
    assert!(z[3].as_f64().unwrap() > 2.0, "{v}");

    let (s, _) = send(&app, "POST", "/api/encode", Some(json!({"imag": "x"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = send(&app, "POST", "/api/encode", Some(json!({"image": "not base64!"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = send_json(&app, "POST", "/api/encode", Some(json!({"model": "nope", "image": b64_png(&pairs[0].1)}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND, "{v}");
    let small = ImageTensor::constant(16, 16, 0.0).unwrap();
    let (s, v) = send_json(&app, "POST", "/api/encode", Some(json!({"image": b64_png(&small)}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
}

#[tokio::test]
async fn malformed_json_is_a_bad_request() {
    let fx = Fixture::new();
    let req = Request::builder()
        .method("POST")
        .uri("/api/edit")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let resp = app(&fx).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn identical_references_are_a_degenerate_pair() {
    let fx = Fixture::new();
    let pairs = eyewear_reference_pairs(1, 9, RES).unwrap();
    let img = b64_png(&pairs[0].0);
    let body = json!({"neutral_image": img, "attributed_image": img});
    let (s, v) = send_json(&app(&fx), "POST", "/api/direction", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("degenerate"), "{v}");
    assert_eq!(std::fs::read_dir(fx.ws.directions()).unwrap().count(), 0);
}

#[tokio::test]
async fn rebuilding_a_direction_gives_the_same_id() {
    let fx = Fixture::new();
    let app = app(&fx);
    let a = eyewear_direction(&app).await;
    let b = eyewear_direction(&app).await;
    assert_eq!(a, b);
    assert!(a.starts_with("eyewear-"));
    assert_eq!(std::fs::read_dir(fx.ws.directions()).unwrap().count(), 1);
}

#[tokio::test]
async fn edit_at_zero_renders_the_source_exactly() {
    let fx = Fixture::new();
    let app = app(&fx);
    let id = eyewear_direction(&app).await;
    let body = json!({"z": source_z(), "direction_id": id, "k": 0.0, "use_unit": false});
    let (s, png) = send(&app, "POST", "/api/edit", Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    let g: GeneratorModel<f32> = fx.ws.load_model(&fx.generator).unwrap();
    let direct = g.generate(&LatentVector::batch::<f32>(&[LatentVector::new(source_z()).unwrap()]).unwrap()).unwrap();
    let expected = ImageTensor::unstack(&direct).unwrap().remove(0);
    assert_eq!(ImageTensor::from_png(&png).unwrap(), expected.requantized());
    assert_eq!(png, expected.to_png().unwrap());
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let fx = Fixture::new();
    let app = app(&fx);
    let id = eyewear_direction(&app).await;
    let pairs = eyewear_reference_pairs(2, 4, RES).unwrap();
    let body = json!({"image": b64_png(&pairs[1].0), "direction_id": id, "k": 0.7});
    let (s1, a) = send(&app, "POST", "/api/edit", Some(body.clone())).await;
    let (s2, b) = send(&app, "POST", "/api/edit", Some(body)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_edits_match_sequential_ones() {
    let fx = Fixture::new();
    let app = app(&fx);
    let id = eyewear_direction(&app).await;
    let bodies: Vec<Value> = [-0.5, 0.8, 1.5, 2.5]
        .iter()
        .map(|k| json!({"z": source_z(), "direction_id": id, "k": k}))
        .collect();
    let mut sequential = Vec::new();
    for b in &bodies {
        sequential.push(send(&app, "POST", "/api/edit", Some(b.clone())).await);
    }
    let handles: Vec<_> = bodies
        .iter()
        .map(|b| {
            let (app, b) = (app.clone(), b.clone());
            tokio::spawn(async move { send(&app, "POST", "/api/edit", Some(b)).await })
        })
        .collect();
    for (h, seq) in handles.into_iter().zip(&sequential) {
        let got = h.await.unwrap();
        assert_eq!(got.0, StatusCode::OK);
        assert_eq!(&got, seq);
    }
    assert_ne!(sequential[0].1, sequential[3].1);
}

#[tokio::test]
async fn a_single_stacked_edit_equals_the_plain_form() {
    let fx = Fixture::new();
    let app = app(&fx);
    let id = eyewear_direction(&app).await;
    let plain = send(&app, "POST", "/api/edit", Some(json!({"z": source_z(), "direction_id": id, "k": 1.2}))).await;
    let stacked =
        send(&app, "POST", "/api/edit", Some(json!({"z": source_z(), "edits": [{"direction_id": id, "k": 1.2}]}))).await;
    assert_eq!(plain, stacked);
    let (s, _) = send(&app, "POST", "/api/edit", Some(json!({"z": source_z(), "direction_id": id}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_direction_is_not_found_and_wrong_dimension_is_unprocessable() {
    let fx = Fixture::new();
    let app = app(&fx);
    let (s, v) = send_json(&app, "POST", "/api/edit", Some(json!({"z": source_z(), "direction_id": "smile", "k": 1.0}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND, "{v}");
    let id = eyewear_direction(&app).await;
    let (s, v) = send_json(&app, "POST", "/api/edit", Some(json!({"z": [0.1, 0.2], "direction_id": id, "k": 1.0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let (s, _) = send(&app, "GET", &format!("/api/k-range?direction_id={id}&z=0.1,0.2"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = send(&app, "GET", "/api/k-range?z=0.1", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn projection_stats_k_range_and_default_sweep_agree() {
    let fx = Fixture::new();
    let app = app(&fx);
    let id = eyewear_direction(&app).await;
    let (s, stats) = send_json(&app, "GET", &format!("/api/projection-stats?direction_id={id}"), None).await;
    assert_eq!(s, StatusCode::OK, "{stats}");
    assert_eq!(stats["dataset"], "labelled");
    let st = &stats["stats"];
    assert_eq!(st["count_neutral"].as_u64().unwrap() + st["count_attributed"].as_u64().unwrap(), 40);
    assert!(st["mu_a"].as_f64().unwrap() > st["mu_n"].as_f64().unwrap());
    let csv = stats["histogram_csv"].as_str().unwrap();
    assert!(csv.starts_with("bin_lo,bin_hi,count_neutral,count_attributed"), "{csv}");
    assert_eq!(csv.lines().count(), 31);

    let z = source_z();
    let zq = z.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    let (s, kr) = send_json(&app, "GET", &format!("/api/k-range?direction_id={id}&z=[{zq}]"), None).await;
    assert_eq!(s, StatusCode::OK, "{kr}");
    let (lo, hi) = (kr["k_lo"].as_f64().unwrap(), kr["k_hi"].as_f64().unwrap());
    assert!(lo < 0.0 && hi > 0.0, "{kr}");

    let (s, sw) = send_json(&app, "POST", "/api/sweep", Some(json!({"z": z, "direction_id": id}))).await;
    assert_eq!(s, StatusCode::OK, "{sw}");
    let ks = sw["k"].as_array().unwrap();
    let images = sw["images"].as_array().unwrap();
    assert_eq!((ks.len(), images.len()), (21, 21));
    assert!((ks[0].as_f64().unwrap() - lo).abs() < 1e-12 && (ks[20].as_f64().unwrap() - hi).abs() < 1e-12);
    // Each frame equals the single-edit render at the same k.
    for i in [0, 10, 20] {
        let k = ks[i].as_f64().unwrap();
        let (_, png) = send(&app, "POST", "/api/edit", Some(json!({"z": z, "direction_id": id, "k": k}))).await;
        assert_eq!(B64.decode(images[i].as_str().unwrap()).unwrap(), png);
    }

    let (s, sw) = send_json(&app, "POST", "/api/sweep", Some(json!({"z": z, "direction_id": id, "k_list": [0.0, 1.0]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(sw["images"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn service_never_touches_checkpoints() {
    let fx = Fixture::new();
    let before: Vec<_> = std::fs::read_dir(fx.ws.checkpoints())
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.clone(), std::fs::read(p).unwrap())
        })
        .collect();
    let app = app(&fx);
    let id = eyewear_direction(&app).await;
    send(&app, "POST", "/api/edit", Some(json!({"z": source_z(), "direction_id": id, "k": 1.0}))).await;
    send(&app, "GET", &format!("/api/projection-stats?direction_id={id}"), None).await;
    for (p, bytes) in before {
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }
    assert_eq!(std::fs::read_dir(fx.ws.checkpoints()).unwrap().count(), 2);
}
