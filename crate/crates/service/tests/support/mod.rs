//! Fixtures and a request helper shared by the service test targets.
#![allow(dead_code)]

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

/// One numeric feature, labels flip between 4 and 5.
pub fn separable_request() -> Value {
    let rows: Vec<Value> = (1..=8)
        .map(|x| json!({"x": x, "flag": x % 2 == 0, "y": if x <= 4 { "low" } else { "high" }}))
        .collect();
    json!({
        "schema": {
            "features": [{"name": "x", "kind": "numeric"}, {"name": "flag", "kind": "boolean"}],
            "label": {"name": "y", "vocabulary": ["low", "high"]}
        },
        "rows": rows
    })
}

pub fn xor_request() -> Value {
    let mut rows = Vec::new();
    for _ in 0..3 {
        for (a, b) in [(false, false), (false, true), (true, false), (true, true)] {
            rows.push(json!({"a": a, "b": b, "y": if a != b { "one" } else { "zero" }}));
        }
    }
    json!({
        "schema": {
            "features": [{"name": "a", "kind": "boolean"}, {"name": "b", "kind": "boolean"}],
            "label": {"name": "y", "vocabulary": ["zero", "one"]}
        },
        "rows": rows
    })
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }

    pub fn error_kind(&self) -> String {
        self.json()["error"]["kind"].as_str().unwrap_or_default().to_string()
    }
}

pub async fn send(app: &Router, req: Request<Body>) -> Reply {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let bytes = to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, headers, bytes }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

pub async fn post(app: &Router, uri: &str, body: &Value) -> Reply {
    post_raw(app, uri, body.to_string()).await
}

pub async fn post_raw(app: &Router, uri: &str, body: impl Into<Body>) -> Reply {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap();
    send(app, req).await
}
