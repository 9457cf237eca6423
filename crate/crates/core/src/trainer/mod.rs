//! Training of the transformation network and the parameter studies built on
//! it.
//!
//! Everything here is deterministic for a fixed config: network init, data
//! order and per-step style choice all derive from `seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, FeatureMap, LayerId};
use crate::checkpoint::{Checkpoint, Provenance};
use crate::error::{Error, Result};
use crate::losses::{self, GramMaps, LossBreakdown, LossTargets, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::raster::ImageTensor;
use crate::transform::{ArchConfig, TransformNet};

mod sweeps;

pub use sweeps::{
    relative_improvement, sweep_batch_size, sweep_epochs, sweep_style_weight, EpochSnapshot, Experiment, SweepConfig,
    SweepReport, SweepRun,
};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "webp"];
pub const THUMBNAIL_SIZE: usize = 64;
/// Smallest allowed style crop, in pixels of area.
pub const MIN_CROP_AREA: usize = 64 * 64;

/// Pixel rectangle inside a style image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub style_id: String,
    #[serde(default)]
    pub display_name: Option<String>,
    #[serde(alias = "image")]
    pub image_path: PathBuf,
    #[serde(default)]
    pub crop: Option<Crop>,
    /// Overrides the run's style layers for this style.
    #[serde(default)]
    pub style_layers: Option<Vec<LayerId>>,
    #[serde(default)]
    pub layer_weights: BTreeMap<LayerId, f64>,
}

impl StyleSpec {
    pub fn new(style_id: impl Into<String>, image_path: impl Into<PathBuf>) -> Self {
        Self {
            style_id: style_id.into(),
            display_name: None,
            image_path: image_path.into(),
            crop: None,
            style_layers: None,
            layer_weights: BTreeMap::new(),
        }
    }

    /// The run's loss weights with this style's layer overrides applied.
    pub fn loss_weights(&self, base: &LossWeights) -> LossWeights {
        let mut w = base.clone();
        if let Some(layers) = &self.style_layers {
            w.style_layers = layers.clone();
            w.layer_weights = self.layer_weights.clone();
        } else if !self.layer_weights.is_empty() {
            w.layer_weights = self.layer_weights.clone();
        }
        w
    }

    pub fn validate_crop(&self, height: usize, width: usize) -> Result<()> {
        let Some(c) = self.crop else { return Ok(()) };
        let bad = |m: String| Err(Error::Config(format!("style `{}`: {m}", self.style_id)));
        if c.x + c.width > width || c.y + c.height > height {
            return bad(format!("crop {c:?} exceeds the {width}x{height} image"));
        }
        if c.width * c.height < MIN_CROP_AREA {
            return bad(format!("crop area {} is below the minimum of {MIN_CROP_AREA}", c.width * c.height));
        }
        Ok(())
    }

    /// Crop (when set) and resize a decoded style image to `resolution`.
    pub fn prepare_image(&self, image: &ImageTensor, resolution: (usize, usize)) -> Result<ImageTensor> {
        let (h, w) = image.dims();
        self.validate_crop(h, w)?;
        let img = match self.crop {
            Some(c) => image.crop(c.y, c.x, c.height, c.width),
            None => image.clone(),
        };
        Ok(img.resize_to_fill(resolution.0, resolution.1))
    }
}

fn default_epochs() -> usize {
    2
}
fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_resolution() -> (usize, usize) {
    (256, 256)
}
fn default_content_dir() -> PathBuf {
    PathBuf::from("data/content")
}
fn default_log_every() -> usize {
    10
}
fn default_divergence() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// (height, width) of training crops.
    #[serde(default = "default_resolution")]
    pub train_resolution: (usize, usize),
    #[serde(default = "default_content_dir")]
    pub content_dir: PathBuf,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Abort when the total loss exceeds this multiple of the first step's.
    #[serde(default = "default_divergence")]
    pub divergence_factor: f64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default, rename = "styles", alias = "style_specs")]
    pub style_specs: Vec<StyleSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            train_resolution: default_resolution(),
            content_dir: default_content_dir(),
            log_every: default_log_every(),
            divergence_factor: default_divergence(),
            optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            arch: ArchConfig::default(),
            backbone: BackboneConfig::default(),
            style_specs: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor must exceed 1");
        }
        self.weights.validate()?;
        self.arch.validate()?;
        let k = self.arch.size_multiple();
        let (h, w) = self.train_resolution;
        if h % k != 0 || w % k != 0 || h < crate::backbone::MIN_INPUT || w < crate::backbone::MIN_INPUT {
            return Err(Error::Config(format!(
                "train_resolution {h}x{w} must be at least {m}x{m} and a multiple of {k}",
                m = crate::backbone::MIN_INPUT
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.style_specs {
            if !ids.insert(&s.style_id) {
                return Err(Error::DuplicateStyle(s.style_id.clone()));
            }
            s.loss_weights(&self.weights).validate()?;
        }
        Ok(())
    }

    /// Every backbone layer any style needs.
    pub fn taps(&self) -> Vec<LayerId> {
        let mut t = self.weights.taps();
        for s in &self.style_specs {
            t.extend(s.loss_weights(&self.weights).taps());
        }
        t.sort();
        t.dedup();
        t
    }

    pub fn steps_per_epoch(&self, dataset: usize) -> usize {
        dataset.div_ceil(self.batch_size)
    }
}

/// Hex sha256 of a serialised config.
pub fn config_hash(resolved: &str) -> String {
    hex::encode(Sha256::digest(resolved.as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub style: usize,
    pub breakdown: LossBreakdown,
}

/// Per-step losses; `step_seconds[i]` is the wall time of `records[i]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<StepRecord>,
    pub step_seconds: Vec<f64>,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.breakdown.total).collect()
    }

    pub fn wall_time_per_step(&self) -> f64 {
        if self.step_seconds.is_empty() {
            0.0
        } else {
            self.step_seconds.iter().sum::<f64>() / self.step_seconds.len() as f64
        }
    }

    /// Mean total loss over the steps of `epoch` (1-based).
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter(|r| r.epoch == epoch).map(|r| r.breakdown.total).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_loss_csv(path, &[(None, self)])
    }
}

const LOSS_COLUMNS: [&str; 8] = ["step", "epoch", "style", "content", "style_loss", "tv", "total", "wall_time"];

/// One CSV for several histories. A labelled history gets a leading `run`
/// column.
pub(crate) fn write_loss_csv(path: &Path, histories: &[(Option<&str>, &LossHistory)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let labelled = histories.iter().any(|(l, _)| l.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut header: Vec<&str> = if labelled { vec!["run"] } else { vec![] };
    header.extend(LOSS_COLUMNS);
    w.write_record(&header)?;
    for (label, h) in histories {
        for (r, t) in h.records.iter().zip(&h.step_seconds) {
            let b = r.breakdown;
            let mut row: Vec<String> = if labelled { vec![label.unwrap_or("").to_string()] } else { vec![] };
            row.extend([
                r.step.to_string(),
                r.epoch.to_string(),
                r.style.to_string(),
                b.content.to_string(),
                b.style.to_string(),
                b.tv.to_string(),
                b.total.to_string(),
                format!("{t:.6}"),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean over non-overlapping `window`-step windows of std/mean of the total
/// loss. A trailing partial window is dropped.
pub fn oscillation(totals: &[f64], window: usize) -> f64 {
    let ratios: Vec<f64> = totals
        .chunks_exact(window)
        .map(|w| {
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            var.sqrt() / mean
        })
        .collect();
    if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

/// A style ready for training: its cropped/resized image, target Grams and
/// the loss weights it trains under.
#[derive(Clone, Debug)]
pub struct PreparedStyle {
    pub spec: StyleSpec,
    pub image: ImageTensor,
    pub weights: LossWeights,
    pub grams: GramMaps<f32>,
}

impl PreparedStyle {
    pub fn new(backbone: &Backbone<f32>, spec: StyleSpec, image: ImageTensor, base: &LossWeights) -> Result<Self> {
        let weights = spec.loss_weights(base);
        let feats = backbone.extract_features(&image, &weights.style_layers)?;
        let grams = losses::grams(&feats, &weights.style_layers)?;
        Ok(Self { spec, image, weights, grams })
    }

    pub fn thumbnail(&self) -> ImageTensor {
        self.image.resize_to_fill(THUMBNAIL_SIZE, THUMBNAIL_SIZE)
    }
}

/// Target Gram matrices per style, computed once from the style images at
/// `resolution`.
pub fn precompute_style_targets(
    backbone: &Backbone<f32>,
    specs: &[StyleSpec],
    base: &LossWeights,
    resolution: (usize, usize),
) -> Result<BTreeMap<String, GramMaps<f32>>> {
    Ok(prepare_styles(backbone, specs, base, resolution)?.into_iter().map(|s| (s.spec.style_id, s.grams)).collect())
}

pub fn prepare_styles(
    backbone: &Backbone<f32>,
    specs: &[StyleSpec],
    base: &LossWeights,
    resolution: (usize, usize),
) -> Result<Vec<PreparedStyle>> {
    specs
        .iter()
        .map(|s| {
            let img = ImageTensor::load(&s.image_path)?;
            let img = s.prepare_image(&img, resolution)?;
            PreparedStyle::new(backbone, s.clone(), img, base)
        })
        .collect()
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Load every image in `dir`, resized and centre-cropped to `resolution`.
pub fn load_content(dir: &Path, resolution: (usize, usize)) -> Result<Vec<ImageTensor>> {
    list_images(dir)?.iter().map(|p| Ok(ImageTensor::load(p)?.resize_to_fill(resolution.0, resolution.1))).collect()
}

/// Which parameters a run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Shared weights and every style's CIN parameters.
    All,
    /// Only the CIN parameters of one style; shared weights stay frozen.
    StyleOnly(usize),
}

/// Passed to the epoch hook after each completed epoch.
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub net: &'a TransformNet<f32>,
    pub history: &'a LossHistory,
}

pub type EpochHook<'a> = dyn FnMut(&EpochEnd<'_>) -> Result<()> + 'a;

/// In-memory training loop.
///
/// `styles[k]` trains style index `k` of `net`'s bank; with
/// [`Trainable::StyleOnly`] only that style is sampled.
pub struct Session<'a> {
    pub config: &'a TrainConfig,
    pub backbone: &'a Backbone<f32>,
    pub content: &'a [ImageTensor],
    pub styles: &'a [PreparedStyle],
}

impl Session<'_> {
    pub fn run(&self, net: &mut TransformNet<f32>, trainable: Trainable, hook: &mut EpochHook<'_>) -> Result<LossHistory> {
        let cfg = self.config;
        cfg.validate()?;
        if self.content.is_empty() {
            return Err(Error::EmptyDataset("no content images".into()));
        }
        if self.content.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} available content images",
                cfg.batch_size,
                self.content.len()
            )));
        }
        if self.styles.len() != net.style_bank.len() {
            return Err(Error::Config(format!(
                "{} prepared styles for a bank of {}",
                self.styles.len(),
                net.style_bank.len()
            )));
        }
        let sampled: Vec<usize> = match trainable {
            Trainable::All => (0..self.styles.len()).collect(),
            Trainable::StyleOnly(k) if k < self.styles.len() => vec![k],
            Trainable::StyleOnly(k) => return Err(Error::UnknownStyle(format!("#{k}"))),
        };

        // Content targets depend only on the content image and layer.
        let mut content_targets: BTreeMap<LayerId, Vec<FeatureMap<f32>>> = BTreeMap::new();
        for s in self.styles {
            let layer = s.weights.content_layer;
            if !content_targets.contains_key(&layer) {
                let feats = self
                    .content
                    .iter()
                    .map(|img| Ok(self.backbone.extract_features(img, &[layer])?.remove(&layer).expect("tapped")))
                    .collect::<Result<Vec<_>>>()?;
                content_targets.insert(layer, feats);
            }
        }

        let shared_sizes: Vec<usize> = net.shared_params_mut().iter().map(|s| s.len()).collect();
        let style_sizes: Vec<usize> = net.style_params_mut(0).iter().map(|s| s.len()).collect();
        let mut shared_opt = Adam::new(cfg.optimizer, &shared_sizes);
        let mut style_opts: Vec<Adam> = (0..self.styles.len()).map(|_| Adam::new(cfg.optimizer, &style_sizes)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
        let mut order: Vec<usize> = (0..self.content.len()).collect();
        let mut history = LossHistory::default();
        let mut initial = None;
        let mut step = 0;
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let started = Instant::now();
                let style = sampled[rng.gen_range(0..sampled.len())];
                let prepared = &self.styles[style];
                let targets_for = &content_targets[&prepared.weights.content_layer];
                let mut grads = net.zero_grads();
                let mut parts = Vec::with_capacity(batch.len());
                for &i in batch {
                    let cache = net.forward_train(self.content[i].tensor(), style)?;
                    let targets = LossTargets { content: &targets_for[i], style: &prepared.grams };
                    let (b, g) = losses::evaluate(self.backbone, cache.output(), &targets, &prepared.weights, true)?;
                    if let Some(term) = b.non_finite_term() {
                        return Err(Error::NonFiniteLoss { term, step });
                    }
                    grads.add_assign(&net.backward(&cache, &g.expect("requested")));
                    parts.push(b);
                }
                grads.scale(1.0 / batch.len() as f32);
                let breakdown = LossBreakdown::mean(&parts);
                let first = *initial.get_or_insert(breakdown.total);
                if breakdown.total > cfg.divergence_factor * first {
                    return Err(Error::Diverged { step, total: breakdown.total, initial: first, factor: cfg.divergence_factor });
                }
                if trainable == Trainable::All {
                    shared_opt.step(net.shared_params_mut(), &grads.shared_slices(), cfg.learning_rate);
                }
                style_opts[style].step(net.style_params_mut(style), &grads.style_slices(), cfg.learning_rate);

                if cfg.log_every > 0 && step % cfg.log_every == 0 {
                    tracing::info!(step, epoch, style, total = breakdown.total, content = breakdown.content, style_loss = breakdown.style, tv = breakdown.tv);
                }
                history.records.push(StepRecord { step, epoch, style, breakdown });
                history.step_seconds.push(started.elapsed().as_secs_f64());
                step += 1;
            }
            hook(&EpochEnd { epoch, net, history: &history })?;
        }
        Ok(history)
    }
}

/// Build a fresh network whose bank matches `styles` (ids, display names,
/// thumbnails, recommended layers).
pub fn fresh_network(config: &TrainConfig, styles: &[PreparedStyle]) -> Result<TransformNet<f32>> {
    if styles.is_empty() {
        return Err(Error::Config("at least one style is required".into()));
    }
    let mut net = TransformNet::new(config.arch, &[], config.seed)?;
    for s in styles {
        register_style(&mut net, s)?;
    }
    Ok(net)
}

fn register_style(net: &mut TransformNet<f32>, s: &PreparedStyle) -> Result<usize> {
    let name = s.spec.display_name.clone().unwrap_or_else(|| s.spec.style_id.clone());
    let k = net.push_style(&s.spec.style_id, &name)?;
    let entry = &mut net.style_bank.styles[k];
    entry.thumbnail = s.thumbnail();
    entry.recommended_layers = s.weights.style_layers.clone();
    Ok(k)
}

pub fn provenance(config: &TrainConfig, backbone: &Backbone<f32>, history: &LossHistory, epochs: usize) -> Result<Provenance> {
    let resolved = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Provenance {
        config_hash: config_hash(&resolved),
        epochs,
        steps: history.records.iter().filter(|r| r.epoch <= epochs).count(),
        seed: config.seed,
        backbone: backbone.provenance.clone(),
    })
}

/// Train from files on disk. Writes `checkpoints/final.safetensors` and
/// `loss.csv` under `run_dir`.
pub fn train(config: &TrainConfig, run_dir: &Path) -> Result<(PathBuf, LossHistory)> {
    config.validate()?;
    if config.style_specs.is_empty() {
        return Err(Error::Config("no styles configured".into()));
    }
    let backbone = config.backbone.load(&config.taps())?;
    let content = load_content(&config.content_dir, config.train_resolution)?;
    let styles = prepare_styles(&backbone, &config.style_specs, &config.weights, config.train_resolution)?;
    let mut net = fresh_network(config, &styles)?;
    let session = Session { config, backbone: &backbone, content: &content, styles: &styles };
    let history = session.run(&mut net, Trainable::All, &mut |_| Ok(()))?;
    let ck = Checkpoint::new(net, provenance(config, &backbone, &history, config.epochs)?);
    let path = run_dir.join("checkpoints").join("final.safetensors");
    ck.save(&path)?;
    history.write_csv(&run_dir.join("loss.csv"))?;
    Ok((path, history))
}

/// Add `style` to a trained network, fine-tuning only its CIN parameters.
///
/// Shared weights and the other styles' parameters are left untouched.
pub fn add_style(
    checkpoint: &Checkpoint,
    style: PreparedStyle,
    config: &TrainConfig,
    backbone: &Backbone<f32>,
    content: &[ImageTensor],
) -> Result<(Checkpoint, LossHistory)> {
    let mut net = checkpoint.net.clone();
    let k = register_style(&mut net, &style)?;
    let mut styles: Vec<PreparedStyle> = Vec::with_capacity(k + 1);
    // Only index k is sampled; the others are placeholders sharing its data.
    styles.resize(k, style.clone());
    styles.push(style);
    let session = Session { config, backbone, content, styles: &styles };
    let history = session.run(&mut net, Trainable::StyleOnly(k), &mut |_| Ok(()))?;
    let mut prov = checkpoint.provenance.clone();
    prov.steps += history.len();
    Ok((Checkpoint::new(net, prov), history))
}

/// Mean loss of `net` over every (content image, style) pair, no update.
pub fn evaluate_net(
    net: &TransformNet<f32>,
    backbone: &Backbone<f32>,
    content: &[ImageTensor],
    styles: &[PreparedStyle],
) -> Result<LossBreakdown> {
    let mut parts = Vec::new();
    for (k, s) in styles.iter().enumerate() {
        for img in content {
            let fp = backbone.extract_features(img, &[s.weights.content_layer])?;
            let out = net.forward_tensor(img.tensor(), k)?;
            let targets = LossTargets { content: &fp[&s.weights.content_layer], style: &s.grams };
            parts.push(losses::evaluate(backbone, &out, &targets, &s.weights, false)?.0);
        }
    }
    Ok(LossBreakdown::mean(&parts))
}

/// Gram distance to the style target and content distance to the input,
/// averaged over `content`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StylizationMetrics {
    /// Style-loss term of the output against the target Grams.
    pub gram_distance: f64,
    /// Content-loss term of the output against its input.
    pub content_distance: f64,
    pub tv: f64,
}

pub fn stylization_metrics(
    net: &TransformNet<f32>,
    backbone: &Backbone<f32>,
    content: &[ImageTensor],
    style: usize,
    prepared: &PreparedStyle,
) -> Result<StylizationMetrics> {
    let mut m = StylizationMetrics::default();
    for img in content {
        let fp = backbone.extract_features(img, &[prepared.weights.content_layer])?;
        let out = net.forward_tensor(img.tensor(), style)?;
        let targets = LossTargets { content: &fp[&prepared.weights.content_layer], style: &prepared.grams };
        let b = losses::evaluate(backbone, &out, &targets, &prepared.weights, false)?.0;
        m.gram_distance += b.style;
        m.content_distance += b.content;
        m.tv += b.tv;
    }
    let n = content.len().max(1) as f64;
    m.gram_distance /= n;
    m.content_distance /= n;
    m.tv /= n;
    Ok(m)
}

/// Mean pairwise normalised Gram distance between style images:
/// ‖G_i − G_j‖_F / (‖G_i‖_F + ‖G_j‖_F), averaged over `layers` and pairs.
///
/// Lies in [0, 1]; 0 for identical images.
pub fn style_set_dispersion(backbone: &Backbone<f32>, images: &[ImageTensor], layers: &[LayerId]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Config(format!("dispersion needs at least 2 styles, got {}", images.len())));
    }
    if layers.is_empty() {
        return Err(Error::Config("dispersion needs at least one layer".into()));
    }
    let grams = images
        .iter()
        .map(|img| losses::grams(&backbone.extract_features(img, layers)?, layers))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..grams.len() {
        for j in i + 1..grams.len() {
            let mut acc = 0.0;
            for l in layers {
                let (a, b) = (&grams[i][l], &grams[j][l]);
                let diff: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
                let denom = a.frobenius_norm() + b.frobenius_norm();
                acc += if denom > 0.0 { diff / denom } else { 0.0 };
            }
            total += acc / layers.len() as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
