#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use higs::service::{router, AppState};
use higs_core::pipeline::ProceduralBackend;

pub fn app() -> (Router, Arc<AppState>) {
    let state = AppState::new(Arc::new(ProceduralBackend::new()));
    (router(state.clone()), state)
}

pub struct Reply {
    pub status: StatusCode,
    pub etag: Option<String>,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<&Value>, if_match: Option<u64>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(r) = if_match {
        req = req.header(header::IF_MATCH, r.to_string());
    }
    let req = match body {
        Some(v) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let etag = resp
        .headers()
        .get(header::ETAG)
        .map(|v| v.to_str().unwrap().trim_matches('"').to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, etag, bytes }
}

pub async fn raw(app: &Router, method: Method, uri: &str, body: &str) -> Reply {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        etag: None,
        bytes,
    }
}
