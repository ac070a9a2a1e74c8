#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use empathy_core::backbone::BackboneBundle;
use empathy_core::decoder::DecodingConfig;
use empathy_core::fixtures::separable_examples;
use empathy_service::api::{router, AppState};
use empathy_service::session::BundleResponder;
use empathy_service::store::SessionStore;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn tiny_responder() -> Arc<BundleResponder> {
    let bundle = BackboneBundle::tiny(&separable_examples(), 1, 32, 17).unwrap();
    Arc::new(BundleResponder::new(bundle, "tiny-test"))
}

pub fn app_with(store: SessionStore) -> Router {
    router(AppState {
        store: Arc::new(store),
        responder: tiny_responder(),
    })
}

pub fn app() -> Router {
    app_with(SessionStore::in_memory(DecodingConfig::default()))
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
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
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn create(app: &Router, body: Option<Value>) -> String {
    let (status, v) = call(app, Method::POST, "/sessions", body).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}
