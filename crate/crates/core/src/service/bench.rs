//! Resolution/latency benchmark over the full request path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Engine, Resolution, StylizeRequest};
use crate::error::{Error, Result};
use crate::raster::Encoding;
use crate::transform::ArchConfig;

/// Median, 90th percentile and mean of a sample, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub median: f64,
    pub p90: f64,
    pub mean: f64,
}

impl StageStats {
    /// Nearest-rank percentiles; all zeros for an empty sample.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        let rank = |p: f64| v[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self { median, p90: rank(0.9), mean: v.iter().sum::<f64>() / n as f64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub resolution: String,
    pub height: usize,
    pub width: usize,
    pub repeats: usize,
    /// `None` when the resolution ran; otherwise why it could not.
    pub failure: Option<String>,
    pub preprocess: StageStats,
    pub inference: StageStats,
    pub postprocess: StageStats,
    pub total: StageStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub rows: Vec<LatencyRow>,
    pub budget_ms: f64,
    /// Largest resolution (by pixel count) whose p90 total fits the budget.
    pub selected: Option<String>,
    pub model_hash: String,
    pub hardware: String,
}

impl LatencyTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        w.write_record([
            "resolution", "height", "width", "repeats", "status", "preprocess_median_ms", "preprocess_p90_ms",
            "inference_median_ms", "inference_p90_ms", "postprocess_median_ms", "postprocess_p90_ms", "total_median_ms",
            "total_p90_ms", "within_budget",
        ])?;
        for r in &self.rows {
            let f = |v: f64| format!("{v:.3}");
            w.write_record([
                r.resolution.clone(),
                r.height.to_string(),
                r.width.to_string(),
                r.repeats.to_string(),
                r.failure.clone().map_or("ok".into(), |e| format!("failed: {e}")),
                f(r.preprocess.median),
                f(r.preprocess.p90),
                f(r.inference.median),
                f(r.inference.p90),
                f(r.postprocess.median),
                f(r.postprocess.p90),
                f(r.total.median),
                f(r.total.p90),
                (r.failure.is_none() && r.total.p90 <= self.budget_ms).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Rough peak bytes of one inference forward pass at `height × width`.
///
/// Dominated by the full-resolution activations around the stem and the last
/// upsampling block (input, conv output and normalised copy) plus the bounded
/// im2col scratch.
pub fn estimate_forward_bytes(arch: &ArchConfig, height: usize, width: usize) -> u64 {
    let px = (height * width) as u64;
    let full_res = px * (3 + 3 * arch.base_channels as u64 + 6);
    4 * full_res + (64 << 20)
}

/// `MemAvailable` from /proc/meminfo, if readable.
pub fn available_memory() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn hardware() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|t| t.lines().find(|l| l.starts_with("model name")).map(|l| l.split(':').nth(1).unwrap_or("").trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu} ({threads} threads, cpu device)")
}

/// Run `repeats` requests per resolution through `engine` and tabulate stage
/// latencies.
///
/// A resolution whose estimated footprint exceeds `memory_limit` (default:
/// currently available memory) or whose request fails is recorded as a
/// failure row and the run continues.
pub fn bench_latency(
    engine: &Engine,
    source_image: &[u8],
    style_id: &str,
    resolutions: &[Resolution],
    repeats: usize,
    budget_ms: f64,
    memory_limit: Option<u64>,
) -> Result<LatencyTable> {
    if repeats < 3 {
        return Err(Error::Config(format!("bench_latency needs at least 3 repeats, got {repeats}")));
    }
    let model = engine.model();
    let limit = memory_limit.or_else(available_memory);
    let source = super::preprocess(source_image, Resolution::Native).map_err(|e| Error::Config(e.message))?;
    let mut rows = Vec::new();
    for &res in resolutions {
        let (height, width) = match res.dims() {
            Some(d) => d,
            None => source.dims(),
        };
        let mut row = LatencyRow {
            resolution: res.to_string(),
            height,
            width,
            repeats,
            failure: None,
            preprocess: StageStats::default(),
            inference: StageStats::default(),
            postprocess: StageStats::default(),
            total: StageStats::default(),
        };
        let need = estimate_forward_bytes(&model.net.arch, height, width);
        if let Some(limit) = limit.filter(|&l| need > l) {
            row.failure = Some(format!("out of memory: needs ~{} MiB, {} MiB available", need >> 20, limit >> 20));
            rows.push(row);
            continue;
        }
        let req = StylizeRequest {
            content_image: source_image.to_vec(),
            style_id: style_id.to_string(),
            target_resolution: res,
            encoding: Encoding::Jpeg,
        };
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            match engine.stylize(&req) {
                Ok(r) => {
                    row.height = r.resolution_used.height;
                    row.width = r.resolution_used.width;
                    samples.push(r.latency_ms);
                }
                Err(e) => {
                    row.failure = Some(e.to_string());
                    break;
                }
            }
        }
        if row.failure.is_none() {
            let stat = |f: fn(&super::LatencyMs) -> f64| StageStats::from_samples(&samples.iter().map(f).collect::<Vec<_>>());
            row.preprocess = stat(|l| l.preprocess);
            row.inference = stat(|l| l.inference);
            row.postprocess = stat(|l| l.postprocess);
            row.total = stat(|l| l.total);
        }
        tracing::info!(resolution = %row.resolution, median_ms = row.total.median, p90_ms = row.total.p90, failure = ?row.failure);
        rows.push(row);
    }
    let selected = rows
        .iter()
        .filter(|r| r.failure.is_none() && r.total.p90 <= budget_ms)
        .max_by_key(|r| r.height * r.width)
        .map(|r| r.resolution.clone());
    Ok(LatencyTable { rows, budget_ms, selected, model_hash: model.hash.clone(), hardware: hardware() })
}
