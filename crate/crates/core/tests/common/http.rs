//! In-process `/v1` client: builds multipart bodies and drives the router
//! with `tower::ServiceExt::oneshot`.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use http_body_util::BodyExt;
use nst_core::checkpoint::Provenance;
use nst_core::service::http::router;
use nst_core::{fixtures, Checkpoint, Engine, ImageTensor, Model, ServiceConfig};
use tower::ServiceExt;

use super::small_arch;

pub const BOUNDARY: &str = "nst-test-boundary";

pub enum Part<'a> {
    Text(&'a str, &'a str),
    File(&'a str, &'a [u8]),
}

pub fn multipart(parts: &[Part<'_>]) -> Vec<u8> {
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::Text(name, value) => {
                body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").as_bytes());
            }
            Part::File(name, bytes) => {
                body.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"upload.png\"\r\nContent-Type: image/png\r\n\r\n")
                        .as_bytes(),
                );
                body.extend_from_slice(bytes);
                body.extend_from_slice(b"\r\n");
            }
        }
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn post(path: &str, parts: &[Part<'_>]) -> Request<Body> {
    Request::post(path)
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(parts)))
        .unwrap()
}

pub fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

pub async fn call(engine: &Arc<Engine>, req: Request<Body>) -> Reply {
    let res = router(engine.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

pub fn png(img: &ImageTensor) -> Vec<u8> {
    nst_core::raster::encode(img, nst_core::raster::Encoding::Png, 100).unwrap()
}

/// Small network whose styles have distinct CIN parameters.
pub fn model(style_ids: &[&str], seed: u64) -> Model {
    let ids: Vec<String> = style_ids.iter().map(|s| s.to_string()).collect();
    let mut net = nst_core::TransformNet::new(small_arch(), &ids, seed).unwrap();
    for k in 0..ids.len() {
        for p in net.style_params_mut(k) {
            p.iter_mut().for_each(|v| *v += 0.05 * k as f32);
        }
        net.style_bank.styles[k].thumbnail = fixtures::texture(fixtures::Texture::Blobs { count: 5, seed: k as u64 }, 32, 32);
    }
    Model::from_checkpoint(Checkpoint::new(net, Provenance { epochs: 1, ..Provenance::default() })).unwrap()
}

pub fn engine(model: Model, queue_depth: usize) -> Arc<Engine> {
    Arc::new(Engine::new(model, ServiceConfig { queue_depth, ..ServiceConfig::default() }))
}
