//! Frozen VGG-16 feature extractor.
//!
//! Features are tapped after the ReLU that follows each convolution, and the
//! network keeps its native 2×2 max pooling between blocks. Inputs are RGB
//! in `[0, 1]`; the per-channel normalisation recorded in
//! [`Preprocessing`] is applied inside the forward pass.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, PadMode};
use crate::raster::ImageTensor;
use crate::tensor::{Real, Tensor};

/// Sub-layer count of each of the five VGG-16 blocks.
const BLOCK_DEPTHS: [u8; 5] = [2, 2, 3, 3, 3];
const BLOCK_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// Smallest accepted input side.
pub const MIN_INPUT: usize = 32;

/// A convolution layer of VGG-16, rendered `conv{block}_{sublayer}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    block: u8,
    sublayer: u8,
}

impl LayerId {
    pub const fn new_unchecked(block: u8, sublayer: u8) -> Self {
        Self { block, sublayer }
    }

    pub fn new(block: u8, sublayer: u8) -> Result<Self> {
        let ok = (1..=5).contains(&block) && sublayer >= 1 && sublayer <= BLOCK_DEPTHS[block as usize - 1];
        if ok {
            Ok(Self { block, sublayer })
        } else {
            Err(Error::InvalidLayer(format!("conv{block}_{sublayer}")))
        }
    }

    pub fn block(self) -> u8 {
        self.block
    }

    pub fn sublayer(self) -> u8 {
        self.sublayer
    }

    /// All thirteen layers in depth order.
    pub fn all() -> Vec<LayerId> {
        (1..=5u8).flat_map(|b| (1..=BLOCK_DEPTHS[b as usize - 1]).map(move |s| LayerId { block: b, sublayer: s })).collect()
    }

    /// Zero-based position in [`LayerId::all`].
    pub fn index(self) -> usize {
        BLOCK_DEPTHS[..self.block as usize - 1].iter().map(|&d| d as usize).sum::<usize>() + self.sublayer as usize - 1
    }

    pub fn channels(self) -> usize {
        BLOCK_WIDTHS[self.block as usize - 1]
    }

    pub fn in_channels(self) -> usize {
        match (self.block, self.sublayer) {
            (1, 1) => 3,
            (b, 1) => BLOCK_WIDTHS[b as usize - 2],
            (b, _) => BLOCK_WIDTHS[b as usize - 1],
        }
    }

    /// Spatial size of this layer's activations for an `h×w` input.
    pub fn spatial(self, h: usize, w: usize) -> (usize, usize) {
        let pools = self.block as u32 - 1;
        (h >> pools, w >> pools)
    }

    pub fn weight_name(self) -> String {
        format!("{self}.weight")
    }

    pub fn bias_name(self) -> String {
        format!("{self}.bias")
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conv{}_{}", self.block, self.sublayer)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidLayer(s.to_string());
        let rest = s.trim().strip_prefix("conv").ok_or_else(bad)?;
        let (b, l) = rest.split_once('_').ok_or_else(bad)?;
        LayerId::new(b.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?)
    }
}

impl Serialize for LayerId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Device {
    #[default]
    Cpu,
}

impl FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cpu" | "cpu:0" => Ok(Device::Cpu),
            _ => Err(Error::UnsupportedDevice(s.to_string())),
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("cpu")
    }
}

impl Serialize for Device {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Device {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where backbone weights come from.
///
/// With `weights` unset a synthetic He-normal backbone seeded by
/// `synthetic_seed` is built instead; see docs/weights.md.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub weights: Option<std::path::PathBuf>,
    pub sha256: Option<String>,
    pub device: Device,
    pub synthetic_seed: u64,
}

impl BackboneConfig {
    /// Load (or synthesise) a backbone deep enough for `taps`.
    pub fn load(&self, taps: &[LayerId]) -> Result<Backbone<f32>> {
        let deepest = taps.iter().map(|l| l.index() + 1).max().unwrap_or(1);
        let bb = match &self.weights {
            Some(path) => load_backbone(path, self.device, self.sha256.as_deref())?,
            None => Backbone::synthetic(self.synthetic_seed, deepest),
        };
        if let Some(l) = taps.iter().find(|l| l.index() >= bb.depth()) {
            return Err(Error::TapTooDeep { layer: l.to_string(), available: bb.depth() });
        }
        Ok(bb)
    }
}

/// Per-channel input normalisation: `(x - mean) / std` for `x` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Preprocessing {
    /// The original VGG-16 release: 0–255 pixel values minus the ImageNet
    /// mean, no variance scaling. Archives converted from that release (RGB
    /// order) use this.
    pub const CAFFE: Self = Self {
        mean: [123.68 / 255.0, 116.779 / 255.0, 103.939 / 255.0],
        std: [1.0 / 255.0, 1.0 / 255.0, 1.0 / 255.0],
    };

    /// torchvision's retrained VGG-16: ImageNet mean and std on `[0, 1]`.
    pub const TORCHVISION: Self = Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self::CAFFE
    }
}

/// Activations of one layer: `channels` rows (N) of `height·width` positions (M).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub layer: LayerId,
    pub tensor: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(layer: LayerId, tensor: Tensor<T>) -> Self {
        Self { layer, tensor }
    }

    /// Build from an `n×m` row-major matrix laid out as a single row of
    /// positions.
    pub fn from_matrix(layer: LayerId, n: usize, m: usize, data: Vec<T>) -> Self {
        Self { layer, tensor: Tensor::from_vec(n, 1, m, data) }
    }

    /// N_l.
    pub fn channels(&self) -> usize {
        self.tensor.channels()
    }

    /// M_l.
    pub fn positions(&self) -> usize {
        self.tensor.plane_len()
    }

    /// The N×M matrix, row-major.
    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }
}

pub type FeatureMaps<T = f32> = BTreeMap<LayerId, FeatureMap<T>>;

/// Frozen VGG-16 convolutional trunk (possibly truncated after some layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T = f32> {
    convs: Vec<Conv2d<T>>,
    pub preprocessing: Preprocessing,
    pub provenance: String,
}

/// Activations kept by [`Backbone::forward_taped`] for the backward pass.
pub struct BackboneTape<T> {
    input_hw: (usize, usize),
    /// Post-ReLU output of every executed conv.
    activations: Vec<Tensor<T>>,
    /// Argmax indices of the pool that follows each completed block.
    pools: Vec<Vec<u32>>,
}

impl<T: Real> BackboneTape<T> {
    pub fn features(&self, taps: &BTreeSet<LayerId>) -> FeatureMaps<T> {
        taps.iter().map(|&l| (l, FeatureMap::new(l, self.activations[l.index()].clone()))).collect()
    }
}

fn conv_spec(layer: LayerId) -> ConvSpec {
    ConvSpec::same(layer.in_channels(), layer.channels(), 3, PadMode::Zero)
}

impl Backbone<f32> {
    /// Backbone with He-normal random weights.
    ///
    /// The test suites and desk-scale experiments run against this when no
    /// pretrained archive is installed; `depth` truncates the trunk after
    /// that many conv layers.
    pub fn synthetic(seed: u64, depth: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = LayerId::all()
            .into_iter()
            .take(depth.clamp(1, 13))
            .map(|l| {
                let spec = conv_spec(l);
                let fan_in = (spec.in_channels * 9) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                let weight = (0..spec.weight_len()).map(|_| normal.sample(&mut rng) as f32).collect();
                let bias = (0..spec.out_channels).map(|_| 0.01f32 * normal.sample(&mut rng) as f32).collect();
                Conv2d::new(spec, weight, bias)
            })
            .collect();
        Self { convs, preprocessing: Preprocessing::default(), provenance: format!("synthetic-he-normal-seed{seed}") }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        for (l, conv) in LayerId::all().into_iter().zip(&self.convs) {
            let s = conv.spec;
            a.insert(l.weight_name(), vec![s.out_channels, s.in_channels, 3, 3], conv.weight.clone());
            a.insert(l.bias_name(), vec![s.out_channels], conv.bias.clone());
        }
        a.metadata.insert("source".into(), self.provenance.clone());
        a.metadata.insert("preprocessing".into(), serde_json::to_string(&self.preprocessing).expect("plain struct"));
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn extract_features(&self, image: &ImageTensor, taps: &[LayerId]) -> Result<FeatureMaps<f32>> {
        self.extract(image.tensor(), taps)
    }
}

/// Load VGG-16 convolution weights from a named-tensor archive.
///
/// The archive must hold `convB_S.weight` / `convB_S.bias` for a prefix of
/// the thirteen layers (at least `conv1_1`); extra tensors such as classifier
/// weights are ignored. When `expected_sha256` is given the file digest must
/// match.
pub fn load_backbone(path: &Path, device: Device, expected_sha256: Option<&str>) -> Result<Backbone<f32>> {
    let Device::Cpu = device;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if let Some(want) = expected_sha256.filter(|s| !s.is_empty()) {
        if !want.eq_ignore_ascii_case(&digest) {
            return Err(Error::Archive { path: path.into(), message: format!("sha256 {digest} does not match pinned {want}") });
        }
    }
    let archive = Archive::from_bytes(&bytes, path)?;
    let mut convs = Vec::new();
    let mut ended = None;
    for l in LayerId::all() {
        let present = archive.tensors.contains_key(&l.weight_name());
        match (present, ended) {
            (true, Some(last)) => {
                return Err(Error::Archive { path: path.into(), message: format!("{l} present but {last} is missing") })
            }
            (false, None) => ended = Some(l),
            (false, Some(_)) => {}
            (true, None) => {
                let s = conv_spec(l);
                let w = archive.expect(&l.weight_name(), &[s.out_channels, s.in_channels, 3, 3])?;
                let b = archive.expect(&l.bias_name(), &[s.out_channels])?;
                convs.push(Conv2d::new(s, w.data.clone(), b.data.clone()));
            }
        }
    }
    if convs.is_empty() {
        return Err(Error::MissingTensor(LayerId::new_unchecked(1, 1).weight_name()));
    }
    let preprocessing = match archive.metadata.get("preprocessing") {
        Some(s) => serde_json::from_str(s)?,
        None => Preprocessing::default(),
    };
    let source = archive.metadata.get("source").cloned().unwrap_or_else(|| path.display().to_string());
    Ok(Backbone { convs, preprocessing, provenance: format!("{source}@sha256:{digest}") })
}

impl<T: Real> Backbone<T> {
    pub fn depth(&self) -> usize {
        self.convs.len()
    }

    pub fn conv(&self, layer: LayerId) -> Option<&Conv2d<T>> {
        self.convs.get(layer.index())
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        let cast = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        Backbone {
            convs: self.convs.iter().map(|c| Conv2d::new(c.spec, cast(&c.weight), cast(&c.bias))).collect(),
            preprocessing: self.preprocessing,
            provenance: self.provenance.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }

    fn validate(&self, x: &Tensor<T>, taps: &BTreeSet<LayerId>) -> Result<LayerId> {
        if x.channels() != 3 {
            return Err(Error::Shape(format!("backbone input has {} channels, expected 3", x.channels())));
        }
        if x.height() < MIN_INPUT || x.width() < MIN_INPUT {
            return Err(Error::ImageTooSmall { height: x.height(), width: x.width(), min: MIN_INPUT });
        }
        let deepest = *taps.iter().next_back().ok_or_else(|| Error::Config("no feature taps requested".into()))?;
        if deepest.index() >= self.convs.len() {
            return Err(Error::TapTooDeep { layer: deepest.to_string(), available: self.convs.len() });
        }
        Ok(deepest)
    }

    fn normalize(&self, x: &Tensor<T>) -> Tensor<T> {
        let p = self.preprocessing;
        let mut out = x.clone();
        for c in 0..3 {
            let (m, s) = (T::of(p.mean[c] as f64), T::of(p.std[c] as f64));
            for v in out.plane_mut(c) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// Run the trunk up to the deepest tap, keeping what backward needs.
    pub fn forward_taped(&self, x: &Tensor<T>, taps: &[LayerId]) -> Result<BackboneTape<T>> {
        let taps: BTreeSet<LayerId> = taps.iter().copied().collect();
        let deepest = self.validate(x, &taps)?;
        let normalized = self.normalize(x);
        let mut activations: Vec<Tensor<T>> = Vec::with_capacity(deepest.index() + 1);
        let mut pools = Vec::new();
        for layer in LayerId::all().into_iter().take(deepest.index() + 1) {
            let conv = &self.convs[layer.index()];
            let mut y = match activations.last() {
                None => conv.forward(&normalized),
                Some(prev) if layer.sublayer() == 1 => {
                    let (p, arg) = nn::max_pool2(prev);
                    pools.push(arg);
                    conv.forward(&p)
                }
                Some(prev) => conv.forward(prev),
            };
            nn::relu_inplace(&mut y);
            activations.push(y);
        }
        Ok(BackboneTape { input_hw: (x.height(), x.width()), activations, pools })
    }

    /// Features at every tap from one forward pass.
    pub fn extract(&self, x: &Tensor<T>, taps: &[LayerId]) -> Result<FeatureMaps<T>> {
        let tape = self.forward_taped(x, taps)?;
        Ok(tape.features(&taps.iter().copied().collect()))
    }

    /// Gradient with respect to the `[0, 1]` input image given gradients
    /// with respect to tapped features.
    pub fn backward(&self, tape: &BackboneTape<T>, grads: &BTreeMap<LayerId, Tensor<T>>) -> Tensor<T> {
        let executed = tape.activations.len();
        let mut grad: Option<Tensor<T>> = None;
        for idx in (0..executed).rev() {
            let layer = LayerId::all()[idx];
            let act = &tape.activations[idx];
            let mut g = grad.take().unwrap_or_else(|| Tensor::zeros(act.channels(), act.height(), act.width()));
            if let Some(extra) = grads.get(&layer) {
                g.add_assign(extra);
            }
            nn::relu_backward(act, &mut g);
            let conv = &self.convs[idx];
            let in_shape = if idx == 0 {
                (3, tape.input_hw.0, tape.input_hw.1)
            } else if layer.sublayer() == 1 {
                let prev = &tape.activations[idx - 1];
                (prev.channels(), prev.height() / 2, prev.width() / 2)
            } else {
                tape.activations[idx - 1].shape()
            };
            let mut gin = conv.backward_input(in_shape, &g);
            if idx > 0 && layer.sublayer() == 1 {
                let prev = &tape.activations[idx - 1];
                gin = nn::max_pool2_backward(prev.shape(), &tape.pools[layer.block() as usize - 2], &gin);
            }
            grad = Some(gin);
        }
        let mut g = grad.expect("at least one layer ran");
        let p = self.preprocessing;
        for c in 0..3 {
            let s = T::of(p.std[c] as f64);
            for v in g.plane_mut(c) {
                *v = *v / s;
            }
        }
        g
    }
}
