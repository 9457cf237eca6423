//! `/v1` HTTP API over an [`Engine`]. Schemas are documented in docs/api.md.

use std::future::Future;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{Dims, Engine, LatencyMs, Resolution, ServiceError, StylizeRequest, StylizeResponse};
use crate::raster::Encoding;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    checkpoint_hash: String,
}

/// JSON body of a successful `POST /v1/stylize`.
#[derive(Serialize)]
pub struct StylizeJson {
    /// Base64 of the encoded image.
    pub image: String,
    pub format: Encoding,
    pub mime: &'static str,
    pub latency_ms: LatencyMs,
    pub resolution_used: Dims,
    pub style_id: String,
    pub model_provenance: String,
}

impl From<StylizeResponse> for StylizeJson {
    fn from(r: StylizeResponse) -> Self {
        Self {
            image: base64::engine::general_purpose::STANDARD.encode(&r.image),
            format: r.encoding,
            mime: r.encoding.mime(),
            latency_ms: r.latency_ms,
            resolution_used: r.resolution_used,
            style_id: r.style_id,
            model_provenance: r.model_provenance,
        }
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    let limit = engine.config().max_upload_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/styles", get(styles))
        .route("/v1/stylize", post(stylize_json))
        .route("/v1/stylize/raw", post(stylize_raw))
        .route("/v1/metrics", get(metrics))
        .layer(DefaultBodyLimit::max(limit))
        .layer(axum::middleware::map_response(allow_any_origin))
        .with_state(engine)
}

/// The browser client may be served from another origin.
async fn allow_any_origin(mut res: Response) -> Response {
    res.headers_mut().insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    res.headers_mut().insert(
        header::ACCESS_CONTROL_EXPOSE_HEADERS,
        HeaderValue::from_static("etag, x-latency-ms, x-resolution, x-model-provenance"),
    );
    res
}

async fn health(State(engine): State<Arc<Engine>>) -> Json<Health> {
    Json(Health { status: "ok", checkpoint_hash: engine.model().hash.clone() })
}

async fn styles(State(engine): State<Arc<Engine>>, headers: HeaderMap) -> Response {
    let manifest = engine.list_styles();
    let body = serde_json::to_vec(&manifest).expect("manifest serialises");
    let etag = format!("\"{}\"", &hex::encode(Sha256::digest(&body))[..32]);
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    let etag_value = HeaderValue::from_str(&etag).expect("hex etag");
    if matches {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag_value)]).into_response();
    }
    (
        [(header::ETAG, etag_value), (header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
        body,
    )
        .into_response()
}

async fn metrics(State(engine): State<Arc<Engine>>) -> Json<super::Metrics> {
    Json(engine.metrics())
}

async fn parse_request(engine: &Engine, mut form: Multipart) -> Result<StylizeRequest, ServiceError> {
    let bad = |code, m: String| ServiceError::bad_request(code, m);
    let mut image = None;
    let mut style_id = None;
    let mut resolution = engine.config().default_resolution;
    let mut encoding = Encoding::Jpeg;
    while let Some(field) = form.next_field().await.map_err(|e| bad("MALFORMED_REQUEST", format!("invalid multipart body: {e}")))? {
        let name = field.name().unwrap_or("").to_string();
        match name.as_str() {
            "image" => {
                let bytes = field.bytes().await.map_err(|e| bad("MALFORMED_REQUEST", format!("cannot read image field: {e}")))?;
                image = Some(bytes.to_vec());
            }
            "style_id" | "resolution" | "format" => {
                let text = field.text().await.map_err(|e| bad("MALFORMED_REQUEST", format!("cannot read field `{name}`: {e}")))?;
                match name.as_str() {
                    "style_id" => style_id = Some(text.trim().to_string()),
                    "resolution" => resolution = text.parse::<Resolution>()?,
                    _ => {
                        encoding = match text.trim().to_ascii_lowercase().as_str() {
                            "jpeg" | "jpg" => Encoding::Jpeg,
                            "png" => Encoding::Png,
                            other => return Err(bad("INVALID_FORMAT", format!("unsupported output format `{other}`; use jpeg or png"))),
                        }
                    }
                }
            }
            _ => {}
        }
    }
    let content_image = image.ok_or_else(|| bad("MISSING_FIELD", "multipart field `image` is required".into()))?;
    let style_id = style_id.filter(|s| !s.is_empty()).ok_or_else(|| bad("MISSING_FIELD", "field `style_id` is required".into()))?;
    Ok(StylizeRequest { content_image, style_id, target_resolution: resolution, encoding })
}

async fn run(engine: Arc<Engine>, form: Multipart) -> Result<StylizeResponse, ServiceError> {
    let req = parse_request(&engine, form).await?;
    tokio::task::spawn_blocking(move || engine.stylize(&req))
        .await
        .map_err(|e| ServiceError::device_failure(format!("inference task failed: {e}")))?
}

async fn stylize_json(State(engine): State<Arc<Engine>>, form: Multipart) -> Result<Json<StylizeJson>, ServiceError> {
    Ok(Json(run(engine, form).await?.into()))
}

/// Same as `/v1/stylize` but returns the encoded image as the body; metadata
/// moves to headers.
async fn stylize_raw(State(engine): State<Arc<Engine>>, form: Multipart) -> Result<Response, ServiceError> {
    let r = run(engine, form).await?;
    let latency = serde_json::to_string(&r.latency_ms).expect("plain struct");
    let hv = |s: String| HeaderValue::from_str(&s).expect("ascii header");
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static(r.encoding.mime())),
            (header::HeaderName::from_static("x-latency-ms"), hv(latency)),
            (header::HeaderName::from_static("x-resolution"), hv(format!("{}x{}", r.resolution_used.width, r.resolution_used.height))),
            (header::HeaderName::from_static("x-model-provenance"), hv(r.model_provenance.clone())),
        ],
        r.image,
    )
        .into_response())
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    engine: Arc<Engine>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(engine)).with_graceful_shutdown(shutdown).await
}
