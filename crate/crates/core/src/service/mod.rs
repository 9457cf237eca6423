//! Inference service: preprocessing, one forward pass per request, encoding,
//! latency instrumentation and the HTTP front end ([`http`]).
//!
//! [`Engine`] is synchronous and usable in-process (the CLI `stylize`
//! subcommand and the benchmarks call it directly). Model execution is
//! serialised through a FIFO [`DeviceQueue`]; admission is bounded by the
//! configured queue depth.

pub mod bench;
pub mod http;

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Device;
use crate::checkpoint::{file_sha256, Checkpoint, Provenance};
use crate::error::Error;
use crate::raster::{decode_oriented, encode, Encoding, ImageTensor};
use crate::transform::TransformNet;

pub use bench::{bench_latency, LatencyRow, LatencyTable, StageStats};

/// Smallest accepted upload, per side.
pub const MIN_UPLOAD_SIDE: usize = 64;
/// Bounds for explicit target dimensions, per side.
pub const EXPLICIT_RANGE: (usize, usize) = (64, 4096);
/// Spatial multiple every network input is cropped to.
pub const SIZE_MULTIPLE: usize = 4;

/// Named portrait operating points, stored as (height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 540×960
    Low,
    /// 1280×2276
    Mid,
    /// 1920×3416
    High,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Low, Preset::Mid, Preset::High];

    pub fn dims(self) -> (usize, usize) {
        match self {
            Preset::Low => (960, 540),
            Preset::Mid => (2276, 1280),
            Preset::High => (3416, 1920),
        }
    }
}

/// Requested output size.
///
/// Text form: `low`, `mid`, `high`, `native`, or `WIDTHxHEIGHT` (same order
/// as the preset names, e.g. `540x960`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Resolution {
    Preset(Preset),
    Native,
    Explicit { height: usize, width: usize },
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution::Preset(Preset::Mid)
    }
}

impl Resolution {
    /// Target (height, width), or `None` for native.
    pub fn dims(self) -> Option<(usize, usize)> {
        match self {
            Resolution::Preset(p) => Some(p.dims()),
            Resolution::Native => None,
            Resolution::Explicit { height, width } => Some((height, width)),
        }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resolution::Preset(Preset::Low) => f.write_str("low"),
            Resolution::Preset(Preset::Mid) => f.write_str("mid"),
            Resolution::Preset(Preset::High) => f.write_str("high"),
            Resolution::Native => f.write_str("native"),
            Resolution::Explicit { height, width } => write!(f, "{width}x{height}"),
        }
    }
}

impl FromStr for Resolution {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, ServiceError> {
        let bad = || ServiceError::bad_request("INVALID_RESOLUTION", format!("unknown resolution `{s}`; use low, mid, high, native or WIDTHxHEIGHT"));
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "mid" => Ok(Resolution::Preset(Preset::Mid)),
            "low" => Ok(Resolution::Preset(Preset::Low)),
            "high" => Ok(Resolution::Preset(Preset::High)),
            "native" => Ok(Resolution::Native),
            other => {
                let (w, h) = other.split_once('x').ok_or_else(bad)?;
                let (width, height): (usize, usize) = (w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?);
                let (lo, hi) = EXPLICIT_RANGE;
                if !(lo..=hi).contains(&width) || !(lo..=hi).contains(&height) {
                    return Err(ServiceError::bad_request(
                        "INVALID_RESOLUTION",
                        format!("explicit dimensions must lie in [{lo}, {hi}], got {width}x{height}"),
                    ));
                }
                Ok(Resolution::Explicit { height, width })
            }
        }
    }
}

impl Serialize for Resolution {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Resolution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(|e: ServiceError| serde::de::Error::custom(e.message))
    }
}

/// Structured error returned to clients as `{code, message}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ServiceError {
    #[serde(skip)]
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ServiceError {
    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self { status: 400, code, message: message.into() }
    }

    pub fn unknown_style(style_id: &str) -> Self {
        Self { status: 404, code: "UNKNOWN_STYLE", message: format!("style `{style_id}` is not in the served style bank") }
    }

    pub fn busy(depth: usize) -> Self {
        Self { status: 429, code: "BUSY", message: format!("inference queue is full ({depth} requests); retry shortly") }
    }

    pub fn device_failure(message: impl Into<String>) -> Self {
        Self { status: 500, code: "DEVICE_FAILURE", message: message.into() }
    }
}

impl fmt::Display for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.status, self.message)
    }
}

impl std::error::Error for ServiceError {}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_checkpoint() -> PathBuf {
    PathBuf::from("checkpoints/model.safetensors")
}
fn default_queue_depth() -> usize {
    8
}
fn default_budget() -> f64 {
    5000.0
}
fn default_quality() -> u8 {
    90
}
fn default_max_upload() -> usize {
    32 << 20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub device: Device,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    /// Requests admitted at once (queued plus running).
    #[serde(default = "default_queue_depth")]
    pub queue_depth: usize,
    #[serde(default = "default_budget")]
    pub latency_budget_ms: f64,
    #[serde(default = "default_quality")]
    pub jpeg_quality: u8,
    #[serde(default)]
    pub default_resolution: Resolution,
    #[serde(default = "default_max_upload")]
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            device: Device::Cpu,
            checkpoint: default_checkpoint(),
            queue_depth: default_queue_depth(),
            latency_budget_ms: default_budget(),
            jpeg_quality: default_quality(),
            default_resolution: Resolution::default(),
            max_upload_bytes: default_max_upload(),
        }
    }
}

/// Decode, orient, resize so the long side matches the target's long side,
/// then centre-crop both sides down to a multiple of 4.
pub fn preprocess(bytes: &[u8], target: Resolution) -> Result<ImageTensor, ServiceError> {
    let img = decode_oriented(bytes).map_err(|e| ServiceError::bad_request("INVALID_IMAGE", format!("cannot decode image: {e}")))?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    if h < MIN_UPLOAD_SIDE || w < MIN_UPLOAD_SIDE {
        return Err(ServiceError::bad_request(
            "IMAGE_TOO_SMALL",
            format!("image is {w}x{h}; both sides must be at least {MIN_UPLOAD_SIDE}"),
        ));
    }
    let img = ImageTensor::from_rgb8(&img.to_rgb8());
    let (rh, rw) = match target.dims() {
        None => (h, w),
        Some((th, tw)) => {
            let long = th.max(tw) as f64;
            let s = long / h.max(w) as f64;
            (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1))
        }
    };
    let img = if (rh, rw) == (h, w) { img } else { img.resize_exact(rh, rw) };
    let (ch, cw) = (rh / SIZE_MULTIPLE * SIZE_MULTIPLE, rw / SIZE_MULTIPLE * SIZE_MULTIPLE);
    Ok(if (ch, cw) == (rh, rw) { img } else { img.crop((rh - ch) / 2, (rw - cw) / 2, ch, cw) })
}

#[derive(Clone, Debug)]
pub struct StylizeRequest {
    pub content_image: Vec<u8>,
    pub style_id: String,
    pub target_resolution: Resolution,
    pub encoding: Encoding,
}

/// Stage timings in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyMs {
    pub preprocess: f64,
    pub inference: f64,
    pub postprocess: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StylizeResponse {
    pub image: Vec<u8>,
    pub encoding: Encoding,
    pub latency_ms: LatencyMs,
    pub resolution_used: Dims,
    pub style_id: String,
    /// sha256 of the served checkpoint file.
    pub model_provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleManifestEntry {
    pub style_id: String,
    pub display_name: String,
    /// Base64 PNG.
    pub thumbnail: String,
    pub recommended_layers: Vec<String>,
}

/// A servable model and its identity.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: TransformNet<f32>,
    pub provenance: Provenance,
    /// sha256 of the checkpoint bytes.
    pub hash: String,
}

impl Model {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> crate::Result<Self> {
        let ck = Checkpoint::from_bytes(bytes, origin)?;
        Ok(Self { net: ck.net, provenance: ck.provenance, hash: file_sha256(bytes) })
    }

    /// Wrap an in-memory checkpoint; the hash is computed over its encoding.
    pub fn from_checkpoint(ck: Checkpoint) -> crate::Result<Self> {
        let hash = file_sha256(&ck.to_bytes()?);
        Ok(Self { net: ck.net, provenance: ck.provenance, hash })
    }
}

/// FIFO ticket lock: holders are served strictly in arrival order.
#[derive(Default)]
pub struct DeviceQueue {
    state: Mutex<(u64, u64)>,
    turn: Condvar,
}

pub struct DeviceGuard<'a> {
    queue: &'a DeviceQueue,
}

impl DeviceQueue {
    pub fn acquire(&self) -> DeviceGuard<'_> {
        let mut s = self.state.lock().expect("device queue poisoned");
        let ticket = s.0;
        s.0 += 1;
        while s.1 != ticket {
            s = self.turn.wait(s).expect("device queue poisoned");
        }
        DeviceGuard { queue: self }
    }
}

impl Drop for DeviceGuard<'_> {
    fn drop(&mut self) {
        let mut s = self.queue.state.lock().expect("device queue poisoned");
        s.1 += 1;
        self.queue.turn.notify_all();
    }
}

/// Start/end of one network forward pass, relative to engine start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub start_us: u64,
    pub end_us: u64,
}

const SPAN_HISTORY: usize = 1024;
const METRIC_WINDOW: usize = 256;

/// Synchronous inference engine.
pub struct Engine {
    model: RwLock<Arc<Model>>,
    device: DeviceQueue,
    config: ServiceConfig,
    admitted: AtomicUsize,
    forwards: AtomicU64,
    busy_rejections: AtomicU64,
    failpoint: AtomicUsize,
    epoch: Instant,
    spans: Mutex<VecDeque<Span>>,
    recent: Mutex<VecDeque<LatencyMs>>,
}

/// Releases an admission slot on drop.
struct Admission<'a>(&'a AtomicUsize);

impl Drop for Admission<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Engine {
    pub fn new(model: Model, config: ServiceConfig) -> Self {
        Self {
            model: RwLock::new(Arc::new(model)),
            device: DeviceQueue::default(),
            config,
            admitted: AtomicUsize::new(0),
            forwards: AtomicU64::new(0),
            busy_rejections: AtomicU64::new(0),
            failpoint: AtomicUsize::new(0),
            epoch: Instant::now(),
            spans: Mutex::new(VecDeque::new()),
            recent: Mutex::new(VecDeque::new()),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn model(&self) -> Arc<Model> {
        self.model.read().expect("model lock poisoned").clone()
    }

    /// Replace the served model. Waits for every queued request to finish
    /// its forward pass first.
    pub fn swap_model(&self, model: Model) {
        let _gate = self.device.acquire();
        *self.model.write().expect("model lock poisoned") = Arc::new(model);
    }

    pub fn reload(&self, path: &Path) -> crate::Result<String> {
        let model = Model::load(path)?;
        let hash = model.hash.clone();
        self.swap_model(model);
        Ok(hash)
    }

    /// Network forward passes executed so far.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::SeqCst)
    }

    /// Recorded forward spans, oldest first (bounded history).
    pub fn inference_spans(&self) -> Vec<Span> {
        self.spans.lock().expect("span lock poisoned").iter().copied().collect()
    }

    /// Make the next `n` forward passes fail as a device fault would.
    #[doc(hidden)]
    pub fn inject_device_failures(&self, n: usize) {
        self.failpoint.store(n, Ordering::SeqCst);
    }

    /// Occupy the device as an in-flight forward pass would, until the guard
    /// drops.
    #[doc(hidden)]
    pub fn hold_device(&self) -> DeviceGuard<'_> {
        self.device.acquire()
    }

    pub fn list_styles(&self) -> Vec<StyleManifestEntry> {
        use base64::Engine as _;
        let model = self.model();
        model
            .net
            .style_bank
            .styles
            .iter()
            .map(|s| StyleManifestEntry {
                style_id: s.style_id.clone(),
                display_name: s.display_name.clone(),
                thumbnail: base64::engine::general_purpose::STANDARD
                    .encode(encode(&s.thumbnail, Encoding::Png, 100).expect("PNG encoding of an in-memory raster")),
                recommended_layers: s.recommended_layers.iter().map(|l| l.to_string()).collect(),
            })
            .collect()
    }

    pub fn stylize(&self, req: &StylizeRequest) -> Result<StylizeResponse, ServiceError> {
        let t0 = Instant::now();
        let depth = self.config.queue_depth.max(1);
        if self.admitted.fetch_add(1, Ordering::SeqCst) >= depth {
            self.admitted.fetch_sub(1, Ordering::SeqCst);
            self.busy_rejections.fetch_add(1, Ordering::Relaxed);
            return Err(ServiceError::busy(depth));
        }
        let _admission = Admission(&self.admitted);

        // Resolve the style against the current model before doing any work.
        if self.model().net.style_bank.index_of(&req.style_id).is_err() {
            return Err(ServiceError::unknown_style(&req.style_id));
        }
        let input = preprocess(&req.content_image, req.target_resolution)?;
        let t1 = Instant::now();

        let (output, model, t2a, t2b) = {
            let _device = self.device.acquire();
            let model = self.model();
            let style = model.net.style_bank.index_of(&req.style_id).map_err(|_| ServiceError::unknown_style(&req.style_id))?;
            let start = Instant::now();
            let result = self.forward_once(&model.net, &input, style);
            let end = Instant::now();
            self.record_span(start, end);
            (result?, model, start, end)
        };
        let t2 = Instant::now();
        let (h, w) = output.dims();
        let image = encode(&output, req.encoding, self.config.jpeg_quality)
            .map_err(|e| ServiceError::device_failure(format!("encoding failed: {e}")))?;
        let t3 = Instant::now();

        let ms = |a: Instant, b: Instant| b.duration_since(a).as_secs_f64() * 1e3;
        let latency = LatencyMs { preprocess: ms(t0, t1), inference: ms(t2a, t2b), postprocess: ms(t2, t3), total: ms(t0, t3) };
        let mut recent = self.recent.lock().expect("metrics lock poisoned");
        if recent.len() == METRIC_WINDOW {
            recent.pop_front();
        }
        recent.push_back(latency);
        Ok(StylizeResponse {
            image,
            encoding: req.encoding,
            latency_ms: latency,
            resolution_used: Dims { height: h, width: w },
            style_id: req.style_id.clone(),
            model_provenance: model.hash.clone(),
        })
    }

    fn forward_once(&self, net: &TransformNet<f32>, input: &ImageTensor, style: usize) -> Result<ImageTensor, ServiceError> {
        self.forwards.fetch_add(1, Ordering::SeqCst);
        let injected = self.failpoint.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok();
        if injected {
            return Err(ServiceError::device_failure("injected device fault; no state was modified, the request may be retried"));
        }
        let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| net.forward_tensor(input.tensor(), style)));
        match run {
            Ok(Ok(t)) => Ok(ImageTensor::new(t)),
            Ok(Err(e)) => Err(ServiceError::device_failure(format!("forward pass failed: {e}"))),
            Err(_) => Err(ServiceError::device_failure("forward pass panicked; the request may be retried")),
        }
    }

    fn record_span(&self, start: Instant, end: Instant) {
        let us = |t: Instant| t.duration_since(self.epoch).as_micros() as u64;
        let mut spans = self.spans.lock().expect("span lock poisoned");
        if spans.len() == SPAN_HISTORY {
            spans.pop_front();
        }
        spans.push_back(Span { start_us: us(start), end_us: us(end) });
    }

    pub fn metrics(&self) -> Metrics {
        let recent: Vec<LatencyMs> = self.recent.lock().expect("metrics lock poisoned").iter().copied().collect();
        let stage = |f: fn(&LatencyMs) -> f64| StageStats::from_samples(&recent.iter().map(f).collect::<Vec<_>>());
        Metrics {
            window: recent.len(),
            forward_count: self.forward_count(),
            busy_rejections: self.busy_rejections.load(Ordering::Relaxed),
            in_flight: self.admitted.load(Ordering::SeqCst),
            queue_depth: self.config.queue_depth,
            preprocess: stage(|l| l.preprocess),
            inference: stage(|l| l.inference),
            postprocess: stage(|l| l.postprocess),
            total: stage(|l| l.total),
        }
    }
}

/// Rolling latency statistics over the most recent requests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub window: usize,
    pub forward_count: u64,
    pub busy_rejections: u64,
    pub in_flight: usize,
    pub queue_depth: usize,
    pub preprocess: StageStats,
    pub inference: StageStats,
    pub postprocess: StageStats,
    pub total: StageStats,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png(h: u32, w: u32) -> Vec<u8> {
        let img = ImageTensor::from_fn(h as usize, w as usize, |y, x, c| ((y + 2 * x + c) % 7) as f32 / 7.0);
        encode(&img, Encoding::Png, 90).unwrap()
    }

    #[test]
    fn resolution_parsing() {
        assert_eq!("mid".parse::<Resolution>().unwrap().dims(), Some((2276, 1280)));
        assert_eq!("540x960".parse::<Resolution>().unwrap().dims(), Some((960, 540)));
        assert_eq!("native".parse::<Resolution>().unwrap(), Resolution::Native);
        assert!("12x960".parse::<Resolution>().is_err());
        assert!("huge".parse::<Resolution>().is_err());
        for r in ["low", "high", "native", "640x480"] {
            assert_eq!(r.parse::<Resolution>().unwrap().to_string(), r);
        }
    }

    #[test]
    fn preprocess_portrait_to_mid() {
        let t = preprocess(&png(192, 108), Resolution::Preset(Preset::Mid)).unwrap();
        let (h, w) = t.dims();
        assert!(h <= 2276 && w <= 1280, "{h}x{w}");
        assert_eq!((h % 4, w % 4), (0, 0));
        assert_eq!(h, 2276);
    }

    #[test]
    fn preprocess_native_keeps_geometry() {
        assert_eq!(preprocess(&png(512, 512), Resolution::Native).unwrap().dims(), (512, 512));
        assert_eq!(preprocess(&png(66, 70), Resolution::Native).unwrap().dims(), (64, 68));
    }

    #[test]
    fn preprocess_rejects_small_and_garbage() {
        assert_eq!(preprocess(&png(63, 63), Resolution::Native).unwrap_err().code, "IMAGE_TOO_SMALL");
        assert_eq!(preprocess(b"nope", Resolution::Native).unwrap_err().code, "INVALID_IMAGE");
    }

    #[test]
    fn device_queue_is_fifo() {
        let q = Arc::new(DeviceQueue::default());
        let order = Arc::new(Mutex::new(Vec::new()));
        let first = q.acquire();
        let mut handles = Vec::new();
        for i in 0..4 {
            let (qc, order) = (q.clone(), order.clone());
            handles.push(std::thread::spawn(move || {
                let _g = qc.acquire();
                order.lock().unwrap().push(i);
            }));
            // Make arrival order deterministic.
            while q.state.lock().unwrap().0 < i as u64 + 2 {
                std::thread::yield_now();
            }
        }
        drop(first);
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(*order.lock().unwrap(), vec![0, 1, 2, 3]);
    }
}
