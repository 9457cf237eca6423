//! Feed-forward image transformation network with a bank of per-style
//! conditional instance normalisation (CIN) parameters.
//!
//! Layout: 9×9 stem, stride-2 downsampling convs, residual trunk,
//! nearest-neighbour resize-convs, 9×9 head. Every conv except the head is
//! followed by CIN; all padding is reflective. The head output is squashed
//! into `[0, 1]` with `(tanh(z) + 1) / 2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::LayerId;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvGrads, ConvSpec, PadMode};
use crate::raster::ImageTensor;
use crate::tensor::{Real, Tensor};

pub const CIN_EPSILON: f64 = 1e-5;

fn default_stem_kernel() -> usize {
    9
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub down_blocks: usize,
    pub residual_blocks: usize,
    pub up_blocks: usize,
    pub base_channels: usize,
    /// Kernel size of the stem and head convolutions.
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { down_blocks: 2, residual_blocks: 5, up_blocks: 2, base_channels: 32, stem_kernel: 9 }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.down_blocks != self.up_blocks {
            return Err(Error::Config(format!(
                "up_blocks ({}) must equal down_blocks ({}) so output size matches input",
                self.up_blocks, self.down_blocks
            )));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Config("stem_kernel must be odd".into()));
        }
        if self.residual_blocks == 0 {
            tracing::warn!("transform network configured without residual blocks");
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.down_blocks
    }

    /// Convolutions in execution order.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let b = self.base_channels;
        let k = self.stem_kernel;
        let mut specs = vec![ConvSpec::same(3, b, k, PadMode::Reflect)];
        let mut ch = b;
        for _ in 0..self.down_blocks {
            specs.push(ConvSpec { stride: 2, ..ConvSpec::same(ch, ch * 2, 3, PadMode::Reflect) });
            ch *= 2;
        }
        for _ in 0..2 * self.residual_blocks {
            specs.push(ConvSpec::same(ch, ch, 3, PadMode::Reflect));
        }
        for _ in 0..self.up_blocks {
            specs.push(ConvSpec { upsample: 2, ..ConvSpec::same(ch, ch / 2, 3, PadMode::Reflect) });
            ch /= 2;
        }
        specs.push(ConvSpec::same(ch, 3, k, PadMode::Reflect));
        specs
    }

    /// Channel count of every CIN site (all convs except the head).
    pub fn cin_channels(&self) -> Vec<usize> {
        let specs = self.conv_specs();
        specs[..specs.len() - 1].iter().map(|s| s.out_channels).collect()
    }
}

/// Per-site affine parameters of one style.
#[derive(Clone, Debug, PartialEq)]
pub struct CinParams<T = f32> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Real> CinParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self { scale: vec![T::one(); channels], shift: vec![T::zero(); channels] }
    }

    pub fn zeros(channels: usize) -> Self {
        Self { scale: vec![T::zero(); channels], shift: vec![T::zero(); channels] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEntry<T = f32> {
    pub style_id: String,
    pub display_name: String,
    pub cin_params: Vec<CinParams<T>>,
    pub thumbnail: ImageTensor,
    /// Backbone layers the style was trained against.
    pub recommended_layers: Vec<LayerId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StyleBank<T = f32> {
    pub styles: Vec<StyleEntry<T>>,
}

impl<T: Real> StyleBank<T> {
    pub fn index_of(&self, style_id: &str) -> Result<usize> {
        self.styles.iter().position(|s| s.style_id == style_id).ok_or_else(|| Error::UnknownStyle(style_id.to_string()))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.styles.iter().map(|s| s.style_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }
}

fn placeholder_thumbnail() -> ImageTensor {
    ImageTensor::filled(32, 32, [0.5, 0.5, 0.5])
}

/// Normalise each channel over its spatial positions, then scale and shift.
pub fn cin<T: Real>(features: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    if scale.len() != features.channels() || shift.len() != features.channels() {
        return Err(Error::Shape(format!(
            "CIN parameters have {}/{} entries for {} channels",
            scale.len(),
            shift.len(),
            features.channels()
        )));
    }
    Ok(cin_forward(features, scale, shift).0)
}

struct CinCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

fn cin_forward<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> (Tensor<T>, CinCache<T>) {
    let n = T::of(x.plane_len() as f64);
    let eps = T::of(CIN_EPSILON);
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.channels());
    for c in 0..x.channels() {
        let plane = x.plane(c);
        let mean = plane.iter().copied().sum::<T>() / n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for (h, &v) in xhat.plane_mut(c).iter_mut().zip(plane) {
            *h = (v - mean) * inv;
        }
        for (o, &h) in out.plane_mut(c).iter_mut().zip(xhat.plane(c)) {
            *o = h * scale[c] + shift[c];
        }
    }
    (out, CinCache { xhat, inv_std })
}

fn cin_backward<T: Real>(cache: &CinCache<T>, scale: &[T], grad: &Tensor<T>, pgrad: &mut CinParams<T>) -> Tensor<T> {
    let n = T::of(grad.plane_len() as f64);
    let mut dx = grad.clone();
    for c in 0..grad.channels() {
        let g = grad.plane(c);
        let xh = cache.xhat.plane(c);
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        pgrad.scale[c] += sum_gx;
        pgrad.shift[c] += sum_g;
        let k = scale[c] * cache.inv_std[c] / n;
        for ((d, &gv), &h) in dx.plane_mut(c).iter_mut().zip(g).zip(xh) {
            *d = k * (n * gv - sum_g - h * sum_gx);
        }
    }
    dx
}

/// Gradients of one training example: all shared convs plus the CIN
/// parameters of the style that was used.
#[derive(Clone, Debug)]
pub struct NetGrads<T = f32> {
    pub convs: Vec<ConvGrads<T>>,
    pub cin: Vec<CinParams<T>>,
}

impl<T: Real> NetGrads<T> {
    pub fn add_assign(&mut self, other: &NetGrads<T>) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += *y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += *y);
        }
        for (a, b) in self.cin.iter_mut().zip(&other.cin) {
            a.scale.iter_mut().zip(&b.scale).for_each(|(x, y)| *x += *y);
            a.shift.iter_mut().zip(&b.shift).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.shared_slices_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
        for v in self.style_slices_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn shared_slices(&self) -> Vec<&[T]> {
        self.convs.iter().flat_map(|c| [c.weight.as_slice(), c.bias.as_slice()]).collect()
    }

    pub fn style_slices(&self) -> Vec<&[T]> {
        self.cin.iter().flat_map(|c| [c.scale.as_slice(), c.shift.as_slice()]).collect()
    }

    fn shared_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.convs.iter_mut().flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()]).collect()
    }

    fn style_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.cin.iter_mut().flat_map(|c| [c.scale.as_mut_slice(), c.shift.as_mut_slice()]).collect()
    }
}

struct BlockRecord<T> {
    input: Tensor<T>,
    cin: CinCache<T>,
    relu_out: Option<Tensor<T>>,
}

/// Everything [`TransformNet::backward`] needs from a forward pass.
pub struct ForwardCache<T> {
    style: usize,
    blocks: Vec<BlockRecord<T>>,
    head_input: Tensor<T>,
    output: Tensor<T>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformNet<T = f32> {
    pub arch: ArchConfig,
    convs: Vec<Conv2d<T>>,
    pub style_bank: StyleBank<T>,
}

/// Fresh network: seeded conv weights, identity CIN for `num_styles` styles
/// named `style0`, `style1`, ...
pub fn build_network(arch: ArchConfig, num_styles: usize, seed: u64) -> Result<TransformNet<f32>> {
    if num_styles == 0 {
        return Err(Error::Config("num_styles must be at least 1".into()));
    }
    let ids: Vec<String> = (0..num_styles).map(|i| format!("style{i}")).collect();
    TransformNet::new(arch, &ids, seed)
}

impl<T: Real> TransformNet<T> {
    pub fn new(arch: ArchConfig, style_ids: &[String], seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = arch.conv_specs();
        let last = specs.len() - 1;
        let convs = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let fan_in = (s.in_channels * s.kernel * s.kernel) as f64;
                // The head feeds a tanh; keep its pre-activations small.
                let gain = if i == last { 0.5 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("valid std");
                let w = (0..s.weight_len()).map(|_| T::of(normal.sample(&mut rng))).collect();
                Conv2d::new(s, w, vec![T::zero(); s.out_channels])
            })
            .collect();
        let mut net = Self { arch, convs, style_bank: StyleBank::default() };
        for id in style_ids {
            net.push_style(id, id)?;
        }
        Ok(net)
    }

    /// Append a style with identity CIN parameters.
    pub fn push_style(&mut self, style_id: &str, display_name: &str) -> Result<usize> {
        if self.style_bank.index_of(style_id).is_ok() {
            return Err(Error::DuplicateStyle(style_id.to_string()));
        }
        self.style_bank.styles.push(StyleEntry {
            style_id: style_id.to_string(),
            display_name: display_name.to_string(),
            cin_params: self.arch.cin_channels().into_iter().map(CinParams::identity).collect(),
            thumbnail: placeholder_thumbnail(),
            recommended_layers: Vec::new(),
        });
        Ok(self.style_bank.len() - 1)
    }

    pub fn convs(&self) -> &[Conv2d<T>] {
        &self.convs
    }

    pub(crate) fn from_parts(arch: ArchConfig, convs: Vec<Conv2d<T>>, style_bank: StyleBank<T>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.conv_specs();
        if specs.len() != convs.len() || specs.iter().zip(&convs).any(|(s, c)| *s != c.spec) {
            return Err(Error::Shape("conv layers do not match arch_config".into()));
        }
        let sites = arch.cin_channels();
        for s in &style_bank.styles {
            if s.cin_params.len() != sites.len()
                || s.cin_params.iter().zip(&sites).any(|(p, &c)| p.scale.len() != c || p.shift.len() != c)
            {
                return Err(Error::Shape(format!("CIN parameters of style `{}` do not match arch_config", s.style_id)));
            }
        }
        Ok(Self { arch, convs, style_bank })
    }

    pub fn shared_param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }

    pub fn style_param_count(&self) -> usize {
        self.arch.cin_channels().iter().map(|c| 2 * c).sum()
    }

    pub fn param_count(&self) -> usize {
        self.shared_param_count() + self.style_bank.len() * self.style_param_count()
    }

    pub fn zero_grads(&self) -> NetGrads<T> {
        NetGrads {
            convs: self.convs.iter().map(|c| c.zero_grads()).collect(),
            cin: self.arch.cin_channels().into_iter().map(CinParams::zeros).collect(),
        }
    }

    pub fn shared_params_mut(&mut self) -> Vec<&mut [T]> {
        self.convs.iter_mut().flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()]).collect()
    }

    pub fn style_params_mut(&mut self, style: usize) -> Vec<&mut [T]> {
        self.style_bank.styles[style].cin_params.iter_mut().flat_map(|p| [p.scale.as_mut_slice(), p.shift.as_mut_slice()]).collect()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let k = self.arch.size_multiple();
        if x.channels() != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", x.channels())));
        }
        if x.height() % k != 0 || x.width() % k != 0 {
            return Err(Error::Shape(format!("image {}x{} is not a multiple of {k}", x.height(), x.width())));
        }
        let min = (self.arch.stem_kernel / 2 + 1).max(2 * k);
        if x.height() < min || x.width() < min {
            return Err(Error::ImageTooSmall { height: x.height(), width: x.width(), min });
        }
        Ok(())
    }

    /// Stylise one image in a single pass.
    pub fn forward_tensor(&self, x: &Tensor<T>, style: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if style >= self.style_bank.len() {
            return Err(Error::UnknownStyle(format!("#{style}")));
        }
        Ok(self.run(x, style, None))
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_train(&self, x: &Tensor<T>, style: usize) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        if style >= self.style_bank.len() {
            return Err(Error::UnknownStyle(format!("#{style}")));
        }
        let mut blocks = Vec::new();
        let mut head_input = None;
        let output = self.run(x, style, Some((&mut blocks, &mut head_input)));
        Ok(ForwardCache { style, blocks, head_input: head_input.expect("recorded"), output })
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, x: &Tensor<T>, style: usize, mut rec: Option<(&mut Vec<BlockRecord<T>>, &mut Option<Tensor<T>>)>) -> Tensor<T> {
        let params = &self.style_bank.styles[style].cin_params;
        let a = &self.arch;
        let mut site = 0;
        let block = |input: Tensor<T>, relu: bool, site: &mut usize, rec: &mut Option<(&mut Vec<BlockRecord<T>>, &mut Option<Tensor<T>>)>| {
            let p = &params[*site];
            let y = self.convs[*site].forward(&input);
            let (mut y, cache) = cin_forward(&y, &p.scale, &p.shift);
            if relu {
                nn::relu_inplace(&mut y);
            }
            if let Some((blocks, _)) = rec.as_mut() {
                blocks.push(BlockRecord { input, cin: cache, relu_out: relu.then(|| y.clone()) });
            }
            *site += 1;
            y
        };
        let mut h = x.clone();
        for _ in 0..1 + a.down_blocks {
            h = block(h, true, &mut site, &mut rec);
        }
        for _ in 0..a.residual_blocks {
            let skip = h.clone();
            let inner = block(h, true, &mut site, &mut rec);
            let mut out = block(inner, false, &mut site, &mut rec);
            out.add_assign(&skip);
            h = out;
        }
        for _ in 0..a.up_blocks {
            h = block(h, true, &mut site, &mut rec);
        }
        let z = self.convs[site].forward(&h);
        if let Some((_, head)) = rec.as_mut() {
            **head = Some(h);
        }
        let half = T::of(0.5);
        z.map(|v| (v.tanh() + T::one()) * half)
    }

    /// Backpropagate `grad_out` (gradient w.r.t. the output image).
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> NetGrads<T> {
        let mut grads = self.zero_grads();
        let params = &self.style_bank.styles[cache.style].cin_params;
        let two = T::of(2.0);
        let mut g = grad_out.with_data(
            grad_out.data().iter().zip(cache.output.data()).map(|(&d, &o)| d * two * o * (T::one() - o)).collect(),
        );
        let head = self.convs.len() - 1;
        g = self.convs[head].backward(&cache.head_input, &g, &mut grads.convs[head], true).expect("input grad");

        let mut site = head;
        let step = |g: Tensor<T>, site: &mut usize, grads: &mut NetGrads<T>| -> Tensor<T> {
            *site -= 1;
            let r = &cache.blocks[*site];
            let mut g = g;
            if let Some(out) = &r.relu_out {
                nn::relu_backward(out, &mut g);
            }
            let g = cin_backward(&r.cin, &params[*site].scale, &g, &mut grads.cin[*site]);
            let need_input = *site > 0;
            self.convs[*site].backward(&r.input, &g, &mut grads.convs[*site], need_input).unwrap_or(g)
        };
        let a = &self.arch;
        for _ in 0..a.up_blocks {
            g = step(g, &mut site, &mut grads);
        }
        for _ in 0..a.residual_blocks {
            let skip = g.clone();
            let inner = step(g, &mut site, &mut grads);
            let mut through = step(inner, &mut site, &mut grads);
            through.add_assign(&skip);
            g = through;
        }
        for _ in 0..1 + a.down_blocks {
            g = step(g, &mut site, &mut grads);
        }
        grads
    }

    pub fn cast<U: Real>(&self) -> TransformNet<U> {
        let cast = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        TransformNet {
            arch: self.arch,
            convs: self.convs.iter().map(|c| Conv2d::new(c.spec, cast(&c.weight), cast(&c.bias))).collect(),
            style_bank: StyleBank {
                styles: self
                    .style_bank
                    .styles
                    .iter()
                    .map(|s| StyleEntry {
                        style_id: s.style_id.clone(),
                        display_name: s.display_name.clone(),
                        cin_params: s.cin_params.iter().map(|p| CinParams { scale: cast(&p.scale), shift: cast(&p.shift) }).collect(),
                        thumbnail: s.thumbnail.clone(),
                        recommended_layers: s.recommended_layers.clone(),
                    })
                    .collect(),
            },
        }
    }
}

impl TransformNet<f32> {
    /// Stylise `image` with the named style.
    pub fn forward(&self, image: &ImageTensor, style_id: &str) -> Result<ImageTensor> {
        let idx = self.style_bank.index_of(style_id)?;
        Ok(ImageTensor::new(self.forward_tensor(image.tensor(), idx)?))
    }
}
