//! Parameter studies: style weight, batch size, epoch count, style-set
//! dispersion.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    evaluate_net, fresh_network, load_content, oscillation, prepare_styles, provenance, stylization_metrics,
    LossHistory, PreparedStyle, Session, StylizationMetrics, TrainConfig, Trainable,
};
use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::raster::{tile, ImageTensor};
use crate::transform::TransformNet;

fn default_style_weights() -> Vec<f64> {
    vec![2.0, 5.0, 8.0]
}
fn default_batch_sizes() -> Vec<usize> {
    vec![4, 8, 16]
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_epoch_list() -> Vec<usize> {
    vec![1, 10, 20]
}
fn default_saturation() -> f64 {
    0.10
}
fn default_window() -> usize {
    20
}
fn default_held_out() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_style_weights")]
    pub style_weights: Vec<f64>,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    /// Seeds of the batch-size study; the verdict uses the median over them.
    #[serde(default = "default_seeds")]
    pub batch_seeds: Vec<u64>,
    /// Equal step budget for every batch size. Unset: `train.epochs` epochs
    /// each.
    #[serde(default)]
    pub batch_steps: Option<usize>,
    #[serde(default = "default_epoch_list")]
    pub epochs: Vec<usize>,
    /// Relative improvement between the last two snapshots below which the
    /// epoch study reports saturation.
    #[serde(default = "default_saturation")]
    pub saturation_threshold: f64,
    #[serde(default = "default_window")]
    pub oscillation_window: usize,
    /// Images for output metrics and grids. Unset: the last
    /// `held_out_count` images of the content directory are held out.
    #[serde(default)]
    pub held_out_dir: Option<PathBuf>,
    #[serde(default = "default_held_out")]
    pub held_out_count: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            style_weights: default_style_weights(),
            batch_sizes: default_batch_sizes(),
            batch_seeds: default_seeds(),
            batch_steps: None,
            epochs: default_epoch_list(),
            saturation_threshold: default_saturation(),
            oscillation_window: default_window(),
            held_out_dir: None,
            held_out_count: default_held_out(),
        }
    }
}

/// Everything a study needs, loaded once.
pub struct Experiment {
    pub config: TrainConfig,
    pub backbone: Backbone<f32>,
    pub content: Vec<ImageTensor>,
    pub held_out: Vec<ImageTensor>,
    pub styles: Vec<PreparedStyle>,
}

impl Experiment {
    /// Load content, held-out images and styles from disk.
    pub fn load(config: &TrainConfig, sweep: &SweepConfig) -> Result<Self> {
        config.validate()?;
        let backbone = config.backbone.load(&config.taps())?;
        let mut content = load_content(&config.content_dir, config.train_resolution)?;
        let held_out = match &sweep.held_out_dir {
            Some(dir) => load_content(dir, config.train_resolution)?,
            None => {
                if content.len() <= sweep.held_out_count {
                    return Err(Error::EmptyDataset(format!(
                        "{} content images cannot spare {} held-out images",
                        content.len(),
                        sweep.held_out_count
                    )));
                }
                content.split_off(content.len() - sweep.held_out_count)
            }
        };
        let styles = prepare_styles(&backbone, &config.style_specs, &config.weights, config.train_resolution)?;
        Ok(Self { config: config.clone(), backbone, content, held_out, styles })
    }

    /// Train a fresh network under `config`, calling `hook` after each epoch.
    pub fn train(
        &self,
        config: &TrainConfig,
        hook: &mut super::EpochHook<'_>,
    ) -> Result<(TransformNet<f32>, LossHistory)> {
        let styles = self.styles_under(config);
        let mut net = fresh_network(config, &styles)?;
        let session = Session { config, backbone: &self.backbone, content: &self.content, styles: &styles };
        let history = session.run(&mut net, Trainable::All, hook)?;
        Ok((net, history))
    }

    /// Styles re-weighted for `config`. Sweeps change α/β/γ only, so the
    /// target Grams stay valid.
    fn styles_under(&self, config: &TrainConfig) -> Vec<PreparedStyle> {
        self.styles.iter().map(|s| PreparedStyle { weights: s.spec.loss_weights(&config.weights), ..s.clone() }).collect()
    }

    fn checkpoint(&self, config: &TrainConfig, net: TransformNet<f32>, history: &LossHistory, epochs: usize) -> Result<Checkpoint> {
        Ok(Checkpoint::new(net, provenance(config, &self.backbone, history, epochs)?))
    }
}

/// One trained configuration of a sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRun {
    pub label: String,
    pub value: f64,
    pub seed: u64,
    #[serde(skip)]
    pub history: LossHistory,
    pub steps: usize,
    pub final_breakdown: LossBreakdown,
    /// Output metrics on the held-out images, style 0.
    pub metrics: Option<StylizationMetrics>,
    pub oscillation: Option<f64>,
    pub wall_time_per_step: f64,
    pub wall_time_per_epoch: f64,
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub kind: String,
    pub runs: Vec<SweepRun>,
    /// Study-specific verdicts and aggregates.
    pub summary: serde_json::Value,
    #[serde(skip)]
    pub grid: Option<ImageTensor>,
}

impl SweepReport {
    /// Write `summary.json`, a combined `loss.csv`, one loss CSV per run,
    /// checkpoints and the grid image under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e| Error::io(p, e);
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for run in &self.runs {
            let csv = dir.join(format!("loss_{}.csv", run.label));
            run.history.write_csv(&csv)?;
            if let Some(ck) = &run.checkpoint {
                ck.save(&dir.join("checkpoints").join(format!("{}.safetensors", run.label)))?;
            }
        }
        let all: Vec<_> = self.runs.iter().map(|r| (Some(r.label.as_str()), &r.history)).collect();
        super::write_loss_csv(&dir.join("loss.csv"), &all)?;
        if let Some(grid) = &self.grid {
            grid.save_png(&dir.join("images").join("grid.png"))?;
        }
        let json = serde_json::to_string_pretty(self)?;
        let path = dir.join("summary.json");
        std::fs::write(&path, json).map_err(|e| io(&path, e))
    }
}

fn run_record(label: String, value: f64, seed: u64, history: LossHistory, steps_per_epoch: usize) -> SweepRun {
    let final_breakdown = history.records.last().map(|r| r.breakdown).unwrap_or_default();
    let per_step = history.wall_time_per_step();
    SweepRun {
        label,
        value,
        seed,
        steps: history.len(),
        final_breakdown,
        metrics: None,
        oscillation: None,
        wall_time_per_step: per_step,
        wall_time_per_epoch: per_step * steps_per_epoch as f64,
        history,
        checkpoint: None,
    }
}

fn output_column(net: &TransformNet<f32>, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    images.iter().map(|img| Ok(ImageTensor::new(net.forward_tensor(img.tensor(), 0)?))).collect()
}

/// Rows = held-out images; first column the input, then one column per run.
fn grid(inputs: &[ImageTensor], columns: &[Vec<ImageTensor>]) -> Option<ImageTensor> {
    if inputs.is_empty() {
        return None;
    }
    let mut cells = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        cells.push(input.clone());
        cells.extend(columns.iter().map(|c| c[i].clone()));
    }
    Some(tile(&cells, columns.len() + 1))
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

/// Train one model per style weight `w_s` (content weight fixed at 1, shared
/// seed) and measure the held-out outputs.
pub fn sweep_style_weight(exp: &Experiment, ws_values: &[f64]) -> Result<SweepReport> {
    if ws_values.is_empty() {
        return Err(Error::Config("no style weights to sweep".into()));
    }
    let mut runs = Vec::new();
    let mut columns = Vec::new();
    for &ws in ws_values {
        let mut cfg = exp.config.clone();
        cfg.weights = cfg.weights.with_style_weight(ws);
        let (net, history) = exp.train(&cfg, &mut |_| Ok(()))?;
        let styles = exp.styles_under(&cfg);
        let mut run = run_record(format!("ws{ws}"), ws, cfg.seed, history, cfg.steps_per_epoch(exp.content.len()));
        run.metrics = Some(stylization_metrics(&net, &exp.backbone, &exp.held_out, 0, &styles[0])?);
        columns.push(output_column(&net, &exp.held_out)?);
        run.checkpoint = Some(exp.checkpoint(&cfg, net, &run.history, cfg.epochs)?);
        runs.push(run);
    }
    let gram: Vec<f64> = runs.iter().map(|r| r.metrics.map_or(f64::NAN, |m| m.gram_distance)).collect();
    let content: Vec<f64> = runs.iter().map(|r| r.metrics.map_or(f64::NAN, |m| m.content_distance)).collect();
    let neg: Vec<f64> = content.iter().map(|c| -c).collect();
    let summary = serde_json::json!({
        "style_weights": ws_values,
        "gram_distance": gram,
        "content_distance": content,
        "gram_distance_non_increasing": non_increasing(&gram),
        "content_distance_non_decreasing": non_increasing(&neg),
    });
    Ok(SweepReport { kind: "style_weight".into(), runs, summary, grid: grid(&exp.held_out, &columns) })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Train every (batch size, seed) pair and report the windowed oscillation
/// metric, its median over seeds, and wall time.
pub fn sweep_batch_size(exp: &Experiment, sweep: &SweepConfig) -> Result<SweepReport> {
    let n_values = &sweep.batch_sizes;
    if n_values.is_empty() || sweep.batch_seeds.is_empty() {
        return Err(Error::Config("batch-size sweep needs batch sizes and seeds".into()));
    }
    if let Some(&n) = n_values.iter().find(|&&n| n == 0 || n > exp.content.len()) {
        return Err(Error::Config(format!("batch size {n} is infeasible for {} content images", exp.content.len())));
    }
    let mut runs = Vec::new();
    let mut medians = Vec::new();
    for &n in n_values {
        let mut osc = Vec::new();
        for &seed in &sweep.batch_seeds {
            let mut cfg = exp.config.clone();
            cfg.batch_size = n;
            cfg.seed = seed;
            if let Some(steps) = sweep.batch_steps {
                cfg.epochs = (steps * n).div_ceil(exp.content.len()).max(1);
            }
            let (_, history) = exp.train(&cfg, &mut |_| Ok(()))?;
            let mut run = run_record(format!("n{n}_seed{seed}"), n as f64, seed, history, cfg.steps_per_epoch(exp.content.len()));
            let o = oscillation(&run.history.totals(), sweep.oscillation_window);
            run.oscillation = Some(o);
            osc.push(o);
            runs.push(run);
        }
        medians.push(median(&mut osc));
    }
    let summary = serde_json::json!({
        "batch_sizes": n_values,
        "seeds": sweep.batch_seeds,
        "window": sweep.oscillation_window,
        "median_oscillation": medians,
    });
    Ok(SweepReport { kind: "batch_size".into(), runs, summary, grid: None })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    /// Loss of the snapshot over the full training set, all styles.
    pub loss: LossBreakdown,
}

/// `(L_prev − L_last) / L_prev` over the last two snapshots.
pub fn relative_improvement(prev: f64, last: f64) -> f64 {
    (prev - last) / prev
}

/// One training run with snapshots at the listed epochs and a saturation
/// verdict for the last interval.
pub fn sweep_epochs(exp: &Experiment, epochs: &[usize], threshold: f64) -> Result<SweepReport> {
    if epochs.is_empty() || epochs.windows(2).any(|w| w[1] <= w[0]) || epochs[0] == 0 {
        return Err(Error::Config(format!("epoch list {epochs:?} must be ascending and start at 1 or later")));
    }
    let mut cfg = exp.config.clone();
    cfg.epochs = *epochs.last().expect("non-empty");
    let styles = exp.styles_under(&cfg);
    let mut snapshots: Vec<(EpochSnapshot, TransformNet<f32>)> = Vec::new();
    let (_, history) = exp.train(&cfg, &mut |e| {
        if epochs.contains(&e.epoch) {
            let loss = evaluate_net(e.net, &exp.backbone, &exp.content, &styles)?;
            snapshots.push((EpochSnapshot { epoch: e.epoch, loss }, e.net.clone()));
        }
        Ok(())
    })?;
    let spe = cfg.steps_per_epoch(exp.content.len());
    let mut runs = Vec::new();
    let mut columns = Vec::new();
    for (snap, net) in &snapshots {
        columns.push(output_column(net, &exp.held_out)?);
        let mut h = history.clone();
        let keep = h.records.iter().filter(|r| r.epoch <= snap.epoch).count();
        h.records.truncate(keep);
        h.step_seconds.truncate(keep);
        let mut run = run_record(format!("epoch{}", snap.epoch), snap.epoch as f64, cfg.seed, h, spe);
        run.final_breakdown = snap.loss;
        run.checkpoint = Some(exp.checkpoint(&cfg, net.clone(), &history, snap.epoch)?);
        runs.push(run);
    }
    let losses: Vec<f64> = snapshots.iter().map(|(s, _)| s.loss.total).collect();
    let improvement = (losses.len() >= 2).then(|| relative_improvement(losses[losses.len() - 2], losses[losses.len() - 1]));
    let verdict = match improvement {
        Some(i) if i < threshold => "saturated",
        Some(_) => "improving",
        None => "undetermined",
    };
    let summary = serde_json::json!({
        "epochs": epochs,
        "loss": losses,
        "snapshots": snapshots.iter().map(|(s, _)| s).collect::<Vec<_>>(),
        "relative_improvement_last": improvement,
        "saturation_threshold": threshold,
        "verdict": verdict,
    });
    let mut report = SweepReport { kind: "epochs".into(), runs, summary, grid: grid(&exp.held_out, &columns) };
    // The full run's history is attached to the last snapshot.
    if let Some(last) = report.runs.last_mut() {
        last.history = history;
    }
    Ok(report)
}
