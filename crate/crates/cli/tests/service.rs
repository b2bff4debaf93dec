use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value as Json};
use tower::ServiceExt;

use setinfer_cli::service::{router, AppState};
use setinfer_cli::wire::SessionWire;
use setinfer_core::synth::{synth_generate, GeneratorSpec};
use setinfer_core::text::EncoderConfig;
use setinfer_core::{Model, ModelConfig};

fn tiny_model() -> Model {
    Model::new(ModelConfig {
        d: 16,
        heads: 2,
        layers: 1,
        aggregate_layers: 1,
        components: 3,
        n_freq: 4,
        text: EncoderConfig {
            d_text: 16,
            ..Default::default()
        },
        ..ModelConfig::default()
    })
    .unwrap()
}

fn app() -> Router {
    let data = vec![
        synth_generate(&GeneratorSpec::by_name("categorical-bayes-net", 20).unwrap(), 0).unwrap(),
        synth_generate(&GeneratorSpec::by_name("mixed", 20).unwrap(), 0).unwrap(),
    ];
    router(Arc::new(AppState::new(Arc::new(tiny_model()), &data, 0)))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Json>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(b) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&b).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Option<Json>) -> (StatusCode, Json) {
    let (s, b) = call(app, method, uri, body).await;
    let v = if b.is_empty() { Json::Null } else { serde_json::from_slice(&b).unwrap() };
    (s, v)
}

#[tokio::test]
async fn schemas_are_listed() {
    let (s, v) = call_json(&app(), Method::GET, "/v1/schemas", None).await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<&str> = v["schemas"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["categorical-bayes-net-0", "mixed-0"]);
}

#[tokio::test]
async fn full_lifecycle() {
    let app = app();
    let (s, v) = call_json(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"dataset": "categorical-bayes-net-0", "target": "y", "budget": 2, "epsilon_mi": 0})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let wire: SessionWire = serde_json::from_value(v.clone()).unwrap();
    let id = wire.session_id.clone();
    assert_eq!(v["suggestion"]["action"], "acquire");
    assert_eq!(v["prediction"]["kind"], "categorical");
    let first = v["suggestion"]["feature_id"].as_str().unwrap().to_string();

    let (s, v) = call_json(
        &app,
        Method::POST,
        &format!("/v1/sessions/{id}/values"),
        Some(json!({"feature_id": first, "value": "yes"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["remaining"], 1.0);
    assert_eq!(v["history"].as_array().unwrap().len(), 1);
    assert!(v["history"][0]["mi_estimate"].is_number());

    let (s, g) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(g, v);

    let (s, p) = call_json(
        &app,
        Method::POST,
        "/v1/predict",
        Some(json!({"dataset": "categorical-bayes-net-0", "observed": {first.clone(): "yes"}, "targets": ["y"]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(p["targets"][0], v["prediction"]);

    let second = v["suggestion"]["feature_id"].as_str().unwrap().to_string();
    assert_ne!(second, first);
    let (s, v) = call_json(
        &app,
        Method::POST,
        &format!("/v1/sessions/{id}/values"),
        Some(json!({"feature_id": second, "value": "no"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["suggestion"]["action"], "stop");
    assert_eq!(v["phase"], "terminated");

    let (s, _) = call(&app, Method::DELETE, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn zero_budget_stops_immediately() {
    let (s, v) = call_json(
        &app(),
        Method::POST,
        "/v1/sessions",
        Some(json!({"dataset": "mixed-0", "target": "y", "budget": 0})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["suggestion"], json!({"action": "stop", "reason": "budget"}));
    assert_eq!(v["prediction"]["kind"], "gmm");
}

#[tokio::test]
async fn error_statuses() {
    let app = app();
    let (_, v) = call_json(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"dataset": "mixed-0", "target": "y", "budget": 1})),
    )
    .await;
    let id = v["session_id"].as_str().unwrap().to_string();
    let values = format!("/v1/sessions/{id}/values");

    let (s, _) = call(&app, Method::GET, "/v1/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Method::POST, "/v1/sessions/nope/values", Some(json!({"feature_id": "age", "value": 30}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Method::POST, "/v1/sessions", Some(json!({"dataset": "nope", "target": "y", "budget": 1}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, e) = call_json(&app, Method::POST, &values, Some(json!({"feature_id": "height", "value": 3}))).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("height")));
    let (s, e) = call_json(&app, Method::POST, &values, Some(json!({"feature_id": "income", "value": "medium"}))).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("income")));
    let (s, e) = call_json(&app, Method::POST, &values, Some(json!({"feature_id": "age", "value": 400}))).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("age")));
    let (s, e) = call_json(&app, Method::POST, &values, Some(json!({"feature_id": "y", "value": 10}))).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("y")));
    let (s, _) = call(&app, Method::POST, &values, Some(json!({"feature": "age"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(&app, Method::POST, &values, Some(json!({"feature_id": "age", "value": 30}))).await;
    assert_eq!(s, StatusCode::OK);
    // The budget is spent, so the session has stopped.
    let (s, v) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["suggestion"], json!({"action": "stop", "reason": "budget"}));
    let (s, _) = call(&app, Method::POST, &values, Some(json!({"feature_id": "income", "value": "low"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, v) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(v["acquired"], json!([{"feature_id": "age", "value": 30.0}]));
}

#[tokio::test]
async fn conflicts_in_an_active_session() {
    let app = app();
    let schema = json!({
        "name": "costed", "context": "readings with costs",
        "features": [
            {"id": "a", "desc": "cheap reading", "type": "categorical", "choices": ["no", "yes"], "cost": 1},
            {"id": "b", "desc": "expensive reading", "type": "categorical", "choices": ["no", "yes"], "cost": 5},
            {"id": "c", "desc": "another cheap reading", "type": "categorical", "choices": ["no", "yes"], "cost": 1},
            {"id": "y", "desc": "outcome", "type": "categorical", "choices": ["no", "yes"]}
        ]
    });
    let (s, v) = call_json(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"schema": schema, "target": "y", "budget": 3, "epsilon_mi": 0})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["session_id"].as_str().unwrap();
    let values = format!("/v1/sessions/{id}/values");
    let (s, e) = call_json(&app, Method::POST, &values, Some(json!({"feature_id": "b", "value": "yes"}))).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::CONFLICT, Some("b")));
    let (s, _) = call(&app, Method::POST, &values, Some(json!({"feature_id": "a", "value": "yes"}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, e) = call_json(&app, Method::POST, &values, Some(json!({"feature_id": "a", "value": "no"}))).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::CONFLICT, Some("a")));
    let (_, v) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(v["acquired"], json!([{"feature_id": "a", "value": "yes"}]));
    assert_eq!(v["remaining"], 2.0);
    assert_eq!(v["phase"], "active");
}

#[tokio::test]
async fn predict_ignores_key_order() {
    let app = app();
    let a = r#"{"dataset": "mixed-0", "observed": {"age": 40, "income": "high"}, "targets": ["y"]}"#;
    let b = r#"{"targets": ["y"], "observed": {"income": "high", "age": 40}, "dataset": "mixed-0"}"#;
    let send = |body: &'static str| {
        let app = app.clone();
        async move {
            let req = Request::post("/v1/predict")
                .header("content-type", "application/json")
                .body(Body::from(body))
                .unwrap();
            let resp = app.oneshot(req).await.unwrap();
            assert_eq!(resp.status(), StatusCode::OK);
            to_bytes(resp.into_body(), usize::MAX).await.unwrap()
        }
    };
    assert_eq!(send(a).await, send(b).await);
}

#[tokio::test]
async fn predict_rejects_observed_target_and_accepts_inline_schema() {
    let app = app();
    let (s, e) = call_json(
        &app,
        Method::POST,
        "/v1/predict",
        Some(json!({"dataset": "mixed-0", "observed": {"y": 10}, "targets": ["y"]})),
    )
    .await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("y")));
    let schema = json!({
        "name": "inline", "context": "two readings",
        "features": [
            {"id": "a", "desc": "first reading", "type": "continuous", "range": [0, 1]},
            {"id": "b", "desc": "second reading", "type": "categorical", "choices": ["lo", "hi"]}
        ]
    });
    let (s, p) = call_json(
        &app,
        Method::POST,
        "/v1/predict",
        Some(json!({"schema": schema, "observed": {"a": 0.3}, "targets": ["b"],
                    "shots": [{"a": 0.1, "b": "lo"}, {"a": 0.9, "b": "hi"}]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let probs = p["targets"][0]["probs"].as_array().unwrap();
    let total: f64 = probs.iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[tokio::test]
async fn interleaved_sessions_stay_isolated() {
    let app = app();
    let create = json!({"dataset": "categorical-bayes-net-0", "target": "y", "budget": 3, "epsilon_mi": 0});
    let (_, a) = call_json(&app, Method::POST, "/v1/sessions", Some(create.clone())).await;
    let (_, b) = call_json(&app, Method::POST, "/v1/sessions", Some(create)).await;
    let (ia, ib) = (a["session_id"].as_str().unwrap(), b["session_id"].as_str().unwrap());
    assert_ne!(ia, ib);
    let post = |id: &str, f: &str, v: &str| {
        (format!("/v1/sessions/{id}/values"), json!({"feature_id": f, "value": v}))
    };
    let steps = [(ia, "x1", "yes"), (ib, "x2", "no"), (ia, "x2", "yes"), (ib, "x1", "no")];
    for (id, f, v) in steps {
        let (uri, body) = post(id, f, v);
        let (s, _) = call(&app, Method::POST, &uri, Some(body)).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, a) = call_json(&app, Method::GET, &format!("/v1/sessions/{ia}"), None).await;
    let (_, b) = call_json(&app, Method::GET, &format!("/v1/sessions/{ib}"), None).await;
    assert_eq!(
        a["acquired"],
        json!([{"feature_id": "x1", "value": "yes"}, {"feature_id": "x2", "value": "yes"}])
    );
    assert_eq!(
        b["acquired"],
        json!([{"feature_id": "x2", "value": "no"}, {"feature_id": "x1", "value": "no"}])
    );
    assert_eq!(a["history"][1]["step"], 2);
    assert_eq!(b["history"][0]["feature_id"], "x2");
}

#[tokio::test]
async fn session_wire_round_trips() {
    let app = app();
    let (_, v) = call_json(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"dataset": "mixed-0", "target": "y", "budget": 2})),
    )
    .await;
    let id = v["session_id"].as_str().unwrap();
    let (_, v) = call_json(
        &app,
        Method::POST,
        &format!("/v1/sessions/{id}/values"),
        Some(json!({"feature_id": "age", "value": 52.5})),
    )
    .await;
    let wire: SessionWire = serde_json::from_value(v).unwrap();
    let schema = synth_generate(&GeneratorSpec::by_name("mixed", 20).unwrap(), 0).unwrap().schema;
    let session = wire.to_session(&schema).unwrap();
    let again = SessionWire::from_session(&wire.session_id, &session, wire.prediction.clone());
    assert_eq!(again, wire);
    assert_eq!(session.to_owned().acquired.len(), 1);
}
