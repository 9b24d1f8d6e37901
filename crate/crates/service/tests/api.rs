use std::sync::Arc;

use atp_core::atpmodel::{AtpModel, ModelConfig};
use atp_core::augmentation::{demo_records, generate_demos};
use atp_core::kinematics::KinematicChain;
use atp_core::projection::ProjectionConfig;
use atp_service::{router, ModelInfo, ServiceState, TraverseResponse};
use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const STEPS: usize = 12;

fn state() -> Arc<ServiceState> {
    let chain = KinematicChain::default_planar();
    let cfg = ModelConfig {
        encoder_hidden: vec![24, 16],
        decoder_hidden: vec![16, 24],
        seed: 3,
        ..ModelConfig::default()
    };
    let mut model = AtpModel::new(&chain, STEPS, &cfg).unwrap();
    model.meta.per_unit_kl = Some(vec![0.01, 4.9, 0.02, 0.01, 0.03]);
    let demos = demo_records(&chain, generate_demos(&chain, STEPS - 1, 2, 2, 0).unwrap(), 2);
    Arc::new(ServiceState::new(model, ProjectionConfig::default(), demos).unwrap())
}

async fn call(state: &Arc<ServiceState>, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    let req = req.body(Body::from(body.unwrap_or("").to_owned())).unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn model_info_shape_and_stability() {
    let s = state();
    let (status, body) = call(&s, "GET", "/api/model", None).await;
    assert_eq!(status, StatusCode::OK);
    let info: ModelInfo = serde_json::from_value(body.clone()).unwrap();
    assert_eq!((info.k_z, info.k_c, info.dof, info.steps, info.workspace_dim), (5, 4, 3, STEPS, 2));
    assert_eq!(info.per_unit_kl.unwrap().len(), 5);
    assert_eq!(info.link_lengths, vec![0.4, 0.4, 0.3]);
    assert_eq!(info.demo_goals.len(), 4);
    let (_, again) = call(&s, "GET", "/api/model", None).await;
    assert_eq!(again, body);
}

#[tokio::test]
async fn demos_carry_ee_paths() {
    let (status, body) = call(&state(), "GET", "/api/demos", None).await;
    assert_eq!(status, StatusCode::OK);
    let demos = body.as_array().unwrap();
    assert_eq!(demos.len(), 4);
    assert_eq!(demos[3]["family"], 1);
    assert_eq!(demos[0]["ee_path"].as_array().unwrap().len(), STEPS);
    assert_eq!(demos[0]["trajectory"]["steps"], STEPS);
}

#[tokio::test]
async fn plan_reaches_goal() {
    let s = state();
    let body = r#"{"z":[0,0,0,0,0],"c":0,"goal":[0.6,0.4],"project":true}"#;
    let (status, out) = call(&s, "POST", "/api/plan", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{out}");
    assert!(out["err_after_m"].as_f64().unwrap() < 1e-3);
    assert!(out["report"]["converged"].as_bool().unwrap());
    let path = out["ee_path"].as_array().unwrap();
    assert_eq!(path.len(), STEPS);
    let end: Vec<f64> = serde_json::from_value(path[STEPS - 1].clone()).unwrap();
    assert!((end[0] - 0.6).hypot(end[1] - 0.4) < 1e-3);

    let (_, again) = call(&s, "POST", "/api/plan", Some(body)).await;
    assert_eq!(again, out);

    let raw = r#"{"z":[0,0,0,0,0],"c":[0,0,1,0],"goal":[0.6,0.4],"project":false}"#;
    let (status, out) = call(&s, "POST", "/api/plan", Some(raw)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(out["err_after_m"], out["err_before_m"]);
    assert!(out["report"].is_null());
}

#[tokio::test]
async fn plan_error_statuses() {
    let s = state();
    let cases = [
        (r#"{"z":[0,0],"c":0,"goal":[0.6,0.4]}"#, StatusCode::UNPROCESSABLE_ENTITY),
        (r#"{"z":[0,0,0,0,0],"c":0,"goal":[9,9]}"#, StatusCode::UNPROCESSABLE_ENTITY),
        (r#"{"z":[0,0,0,0,0],"c":7,"goal":[0.6,0.4]}"#, StatusCode::UNPROCESSABLE_ENTITY),
        (r#"{"z":[0,0,0,0,0],"goal":[0.6,0.4]}"#, StatusCode::UNPROCESSABLE_ENTITY),
        (r#"{"z":[0,0,0,0,0],"c":0,"goal":[0.6,0.4],"#, StatusCode::BAD_REQUEST),
        ("not json", StatusCode::BAD_REQUEST),
    ];
    for (body, expected) in cases {
        let (status, out) = call(&s, "POST", "/api/plan", Some(body)).await;
        assert_eq!(status, expected, "{body} -> {out}");
        assert!(out["error"].is_string());
    }
    let (_, out) = call(&s, "POST", "/api/plan", Some(r#"{"z":[0,0,0,0,0],"c":0,"goal":[9,9]}"#)).await;
    assert!(out["error"].as_str().unwrap().contains("unreachable"));
}

#[tokio::test]
async fn non_convergence_returns_best_so_far() {
    let body = r#"{"z":[0,0,0,0,0],"c":1,"goal":[0.2,0.7],"cfg":{"max_iters":1,"alpha":0.05}}"#;
    let (status, out) = call(&state(), "POST", "/api/plan", Some(body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let best = &out["best"];
    assert!(!best["report"]["converged"].as_bool().unwrap());
    assert!(best["err_after_m"].as_f64().unwrap() < best["err_before_m"].as_f64().unwrap());
    assert_eq!(best["trajectory"]["steps"], STEPS);
}

#[tokio::test]
async fn traverse_axes() {
    let s = state();
    let fixed = json!({"z":[0,0,0,0,0],"c":0,"goal":[0.6,0.4],"project":false});
    let body = json!({"fixed": fixed, "axis": {"kind":"continuous","index":1}}).to_string();
    let (status, out) = call(&s, "POST", "/api/traverse", Some(&body)).await;
    assert_eq!(status, StatusCode::OK, "{out}");
    let out: TraverseResponse = serde_json::from_value(out).unwrap();
    assert_eq!(out.results.len(), 7);
    assert_eq!(out.grid.first(), Some(&-2.5));

    let body = json!({"fixed": fixed, "axis": {"kind":"continuous","index":0}, "grid":[-1.0, 1.0]}).to_string();
    let (_, out) = call(&s, "POST", "/api/traverse", Some(&body)).await;
    assert_eq!(out["results"].as_array().unwrap().len(), 2);

    let body = json!({"fixed": fixed, "axis": {"kind":"discrete"}}).to_string();
    let (_, out) = call(&s, "POST", "/api/traverse", Some(&body)).await;
    assert_eq!(out["results"].as_array().unwrap().len(), 4);

    let body = json!({"fixed": fixed, "axis": {"kind":"continuous","index":9}}).to_string();
    let (status, _) = call(&s, "POST", "/api/traverse", Some(&body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn cors_headers_present() {
    let req = Request::builder()
        .uri("/api/model")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = router(state()).oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_requests_agree() {
    let s = state();
    let body = r#"{"z":[0.3,-0.2,0,0,0],"c":2,"goal":[0.5,-0.3]}"#;
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let s = s.clone();
            tokio::spawn(async move { call(&s, "POST", "/api/plan", Some(body)).await })
        })
        .collect();
    let mut outs = Vec::new();
    for h in handles {
        outs.push(h.await.unwrap());
    }
    assert!(outs.iter().all(|o| *o == outs[0]));
}

#[test]
fn state_rejects_mismatched_demos() {
    let chain = KinematicChain::default_planar();
    let model = AtpModel::new(&chain, STEPS, &ModelConfig::default()).unwrap();
    let demos = demo_records(&chain, generate_demos(&chain, 20, 1, 1, 0).unwrap(), 1);
    assert!(ServiceState::new(model, ProjectionConfig::default(), demos).is_err());
}
