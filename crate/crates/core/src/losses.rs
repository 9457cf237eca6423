//! Perceptual loss terms: Gram statistics, content, style and total
//! variation, their weighted sum, and analytic gradients of each.
//!
//! Every function is generic over [`Real`] so the same code runs in `f32`
//! during training and in `f64` under the oracle and gradient checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureMap, LayerId};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Raw channel correlations `G = F·Fᵀ` of one layer, with the feature-map
/// shape it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T = f32> {
    pub layer: LayerId,
    /// N_l
    pub channels: usize,
    /// M_l of the feature map the matrix was computed from.
    pub positions: usize,
    /// N×N, row-major.
    pub data: Vec<T>,
}

impl<T: Real> GramMatrix<T> {
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.channels + j]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn cast<U: Real>(&self) -> GramMatrix<U> {
        GramMatrix {
            layer: self.layer,
            channels: self.channels,
            positions: self.positions,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

pub type GramMaps<T = f32> = BTreeMap<LayerId, GramMatrix<T>>;

fn ensure_finite<T: Real>(data: &[T], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `G_ij = Σ_k F_ik F_jk`, unnormalised.
pub fn gram<T: Real>(f: &FeatureMap<T>) -> Result<GramMatrix<T>> {
    ensure_finite(f.data(), &format!("feature map {}", f.layer))?;
    let (n, m) = (f.channels(), f.positions());
    let mut data = vec![T::zero(); n * n];
    let fm = MatRef::new(f.data(), n, m);
    gemm(T::one(), fm, fm.t(), T::zero(), &mut data, n);
    // Enforce exact symmetry regardless of the GEMM's summation order.
    for i in 0..n {
        for j in 0..i {
            let v = data[j * n + i];
            data[i * n + j] = v;
        }
    }
    Ok(GramMatrix { layer: f.layer, channels: n, positions: m, data })
}

pub fn grams<T: Real>(features: &BTreeMap<LayerId, FeatureMap<T>>, layers: &[LayerId]) -> Result<GramMaps<T>> {
    layers
        .iter()
        .map(|l| {
            let f = features.get(l).ok_or_else(|| Error::MissingLayer(l.to_string()))?;
            Ok((*l, gram(f)?))
        })
        .collect()
}

fn check_same_map<T: Real>(fp: &FeatureMap<T>, fx: &FeatureMap<T>) -> Result<()> {
    if fp.layer != fx.layer || fp.tensor.shape() != fx.tensor.shape() {
        return Err(Error::Shape(format!(
            "content features {} {:?} vs {} {:?}",
            fp.layer,
            fp.tensor.shape(),
            fx.layer,
            fx.tensor.shape()
        )));
    }
    Ok(())
}

/// `½ Σ_ij (F_ij(x) − F_ij(p))²`.
pub fn content_loss<T: Real>(fp: &FeatureMap<T>, fx: &FeatureMap<T>) -> Result<T> {
    check_same_map(fp, fx)?;
    let half = T::of(0.5);
    Ok(fx.data().iter().zip(fp.data()).map(|(&x, &p)| (x - p) * (x - p)).sum::<T>() * half)
}

/// Content loss and its gradient with respect to `fx`.
pub fn content_loss_grad<T: Real>(fp: &FeatureMap<T>, fx: &FeatureMap<T>) -> Result<(T, Tensor<T>)> {
    let loss = content_loss(fp, fx)?;
    let grad = fx.tensor.with_data(fx.data().iter().zip(fp.data()).map(|(&x, &p)| x - p).collect());
    Ok((loss, grad))
}

fn layer_norm<T: Real>(n: usize, m: usize) -> T {
    let (n, m) = (n as f64, m as f64);
    T::of(1.0 / (4.0 * n * n * m * m))
}

fn gram_pair<'a, T: Real>(
    grams_a: &'a GramMaps<T>,
    grams_x: &'a GramMaps<T>,
    layer: LayerId,
) -> Result<(&'a GramMatrix<T>, &'a GramMatrix<T>)> {
    let a = grams_a.get(&layer).ok_or_else(|| Error::MissingLayer(format!("{layer} (style target)")))?;
    let x = grams_x.get(&layer).ok_or_else(|| Error::MissingLayer(format!("{layer} (generated)")))?;
    if a.channels != x.channels {
        return Err(Error::Shape(format!("{layer}: gram sizes {} vs {}", a.channels, x.channels)));
    }
    Ok((a, x))
}

/// Squared Frobenius distance of one layer scaled by `1/(4 N² M²)`, with `M`
/// taken from the generated image's map.
pub fn style_layer_distance<T: Real>(ga: &GramMatrix<T>, gx: &GramMatrix<T>) -> T {
    let sq: T = gx.data.iter().zip(&ga.data).map(|(&x, &a)| (x - a) * (x - a)).sum();
    sq * layer_norm::<T>(gx.channels, gx.positions)
}

/// `Σ_l w_l · 1/(4 N_l² M_l²) · Σ_ij (G_ij(x) − G_ij(a))²` over the weighted
/// style layers.
pub fn style_loss<T: Real>(grams_a: &GramMaps<T>, grams_x: &GramMaps<T>, weights: &LossWeights) -> Result<T> {
    let mut total = T::zero();
    for &layer in &weights.style_layers {
        let (a, x) = gram_pair(grams_a, grams_x, layer)?;
        total += T::of(weights.layer_weight(layer)) * style_layer_distance(a, x);
    }
    Ok(total)
}

/// One style layer's weighted loss and its gradient with respect to the
/// generated features: `w_l / (N² M²) · (G(x) − G(a)) · F(x)`.
pub fn style_layer_grad<T: Real>(fx: &FeatureMap<T>, ga: &GramMatrix<T>, layer_weight: f64) -> Result<(T, Tensor<T>)> {
    let gx = gram(fx)?;
    if ga.channels != gx.channels {
        return Err(Error::Shape(format!("{}: gram sizes {} vs {}", fx.layer, ga.channels, gx.channels)));
    }
    let w = T::of(layer_weight);
    let loss = w * style_layer_distance(ga, &gx);
    let (n, m) = (gx.channels, gx.positions);
    let diff: Vec<T> = gx.data.iter().zip(&ga.data).map(|(&x, &a)| x - a).collect();
    let mut grad = vec![T::zero(); n * m];
    let scale = w * layer_norm::<T>(n, m) * T::of(4.0);
    gemm(scale, MatRef::new(&diff, n, n), MatRef::new(fx.data(), n, m), T::zero(), &mut grad, m);
    Ok((loss, fx.tensor.with_data(grad)))
}

/// Isotropic total variation
/// `Σ_ij √((x_{i,j+1} − x_ij)² + (x_{i+1,j} − x_ij)²)`, per channel, summed.
/// A difference whose neighbour lies outside the image contributes zero.
pub fn tv_loss<T: Real>(x: &Tensor<T>) -> Result<T> {
    Ok(tv_impl(x, false)?.0)
}

/// TV loss and its (sub)gradient; pixels whose two differences are both
/// zero contribute a zero subgradient.
pub fn tv_loss_grad<T: Real>(x: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (loss, grad) = tv_impl(x, true)?;
    Ok((loss, grad.expect("requested")))
}

fn tv_impl<T: Real>(x: &Tensor<T>, with_grad: bool) -> Result<(T, Option<Tensor<T>>)> {
    let (c, h, w) = x.shape();
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("total variation needs at least 2x2 pixels, got {h}x{w}")));
    }
    let mut grad = with_grad.then(|| Tensor::zeros(c, h, w));
    let mut total = T::zero();
    for ch in 0..c {
        let p = x.plane(ch);
        for i in 0..h {
            for j in 0..w {
                let here = p[i * w + j];
                let dx = if j + 1 < w { p[i * w + j + 1] - here } else { T::zero() };
                let dy = if i + 1 < h { p[(i + 1) * w + j] - here } else { T::zero() };
                let r = (dx * dx + dy * dy).sqrt();
                total += r;
                if let (Some(g), true) = (grad.as_mut(), r > T::zero()) {
                    let g = g.plane_mut(ch);
                    if j + 1 < w {
                        g[i * w + j + 1] += dx / r;
                    }
                    if i + 1 < h {
                        g[(i + 1) * w + j] += dy / r;
                    }
                    g[i * w + j] -= (dx + dy) / r;
                }
            }
        }
    }
    Ok((total, grad))
}

fn default_alpha() -> f64 {
    1.0
}

fn default_beta() -> f64 {
    5.0
}

/// Mild smoothing at the activation scale of the default preprocessing.
fn default_gamma() -> f64 {
    100.0
}

fn default_content_layer() -> LayerId {
    LayerId::new_unchecked(3, 3)
}

pub fn default_style_layers() -> Vec<LayerId> {
    vec![
        LayerId::new_unchecked(1, 2),
        LayerId::new_unchecked(2, 2),
        LayerId::new_unchecked(3, 3),
        LayerId::new_unchecked(4, 3),
    ]
}

/// Coefficients of the weighted total loss.
///
/// `alpha`/`beta` are the content and style weights (`w_c`/`w_s` are accepted
/// as aliases in config files). An empty `layer_weights` means uniform 1.0 on
/// every style layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_alpha", alias = "w_c")]
    pub alpha: f64,
    #[serde(default = "default_beta", alias = "w_s")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub layer_weights: BTreeMap<LayerId, f64>,
    #[serde(default = "default_content_layer")]
    pub content_layer: LayerId,
    #[serde(default = "default_style_layers")]
    pub style_layers: Vec<LayerId>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            gamma: default_gamma(),
            layer_weights: BTreeMap::new(),
            content_layer: default_content_layer(),
            style_layers: default_style_layers(),
        }
    }
}

impl LossWeights {
    /// Content weight `w_c` fixed at 1 and the given style weight `w_s`.
    pub fn with_style_weight(mut self, w_s: f64) -> Self {
        self.alpha = 1.0;
        self.beta = w_s;
        self
    }

    pub fn layer_weight(&self, layer: LayerId) -> f64 {
        if self.layer_weights.is_empty() {
            1.0
        } else {
            self.layer_weights.get(&layer).copied().unwrap_or(0.0)
        }
    }

    /// Fill in uniform layer weights so that the key set equals the style
    /// layers.
    pub fn resolved(mut self) -> Self {
        if self.layer_weights.is_empty() {
            self.layer_weights = self.style_layers.iter().map(|&l| (l, 1.0)).collect();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("loss weight {name} must be a nonnegative number, got {v}"));
            }
        }
        if self.alpha + self.beta <= 0.0 {
            return bad("alpha + beta must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.style_layers {
            if !seen.insert(*l) {
                return bad(format!("style layer {l} listed twice"));
            }
        }
        if !self.layer_weights.is_empty() {
            let keys: std::collections::BTreeSet<_> = self.layer_weights.keys().copied().collect();
            if keys != seen {
                return bad("layer_weights keys must equal style_layers".into());
            }
            if let Some((l, w)) = self.layer_weights.iter().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
                return bad(format!("layer weight for {l} must be nonnegative, got {w}"));
            }
        }
        Ok(())
    }

    /// Every layer the backbone must tap.
    pub fn taps(&self) -> Vec<LayerId> {
        let mut t: Vec<LayerId> = self.style_layers.clone();
        t.push(self.content_layer);
        t.sort();
        t.dedup();
        t
    }

    pub fn compose(&self, content: f64, style: f64, tv: f64) -> LossBreakdown {
        LossBreakdown { content, style, tv, total: self.alpha * content + self.beta * style + self.gamma * tv }
    }
}

/// The three terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `|total − (α·content + β·style + γ·tv)|` relative to `|total|`.
    pub fn recomposition_error(&self, w: &LossWeights) -> f64 {
        let expect = w.alpha * self.content + w.beta * self.style + w.gamma * self.tv;
        (self.total - expect).abs() / self.total.abs().max(f64::MIN_POSITIVE)
    }

    pub fn is_finite(&self) -> bool {
        self.content.is_finite() && self.style.is_finite() && self.tv.is_finite() && self.total.is_finite()
    }

    /// Name of the first non-finite term.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("content", self.content), ("style", self.style), ("tv", self.tv), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown { content: sum(|b| b.content), style: sum(|b| b.style), tv: sum(|b| b.tv), total: sum(|b| b.total) }
    }
}

/// Precomputed optimisation targets for one content image and one style.
pub struct LossTargets<'a, T> {
    /// Content-layer features of the content image `p`.
    pub content: &'a FeatureMap<T>,
    /// Gram matrices of the style image `a`.
    pub style: &'a GramMaps<T>,
}

/// Loss breakdown for a generated image, and optionally the gradient of the
/// total with respect to that image.
pub fn evaluate<T: Real>(
    backbone: &Backbone<T>,
    x: &Tensor<T>,
    targets: &LossTargets<'_, T>,
    weights: &LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Tensor<T>>)> {
    let taps = weights.taps();
    let tape = backbone.forward_taped(x, &taps)?;
    let feats = tape.features(&taps.iter().copied().collect());
    let fx = &feats[&weights.content_layer];
    let (content, content_grad) = content_loss_grad(targets.content, fx)?;

    let mut feature_grads: BTreeMap<LayerId, Tensor<T>> = BTreeMap::new();
    let mut add = |layer: LayerId, mut g: Tensor<T>, scale: f64| {
        g.scale(T::of(scale));
        match feature_grads.get_mut(&layer) {
            Some(acc) => acc.add_assign(&g),
            None => {
                feature_grads.insert(layer, g);
            }
        }
    };
    if with_grad && weights.alpha != 0.0 {
        add(weights.content_layer, content_grad, weights.alpha);
    }
    let mut style = T::zero();
    for &layer in &weights.style_layers {
        let ga = targets.style.get(&layer).ok_or_else(|| Error::MissingLayer(format!("{layer} (style target)")))?;
        let (l, g) = style_layer_grad(&feats[&layer], ga, weights.layer_weight(layer))?;
        style += l;
        if with_grad && weights.beta != 0.0 {
            add(layer, g, weights.beta);
        }
    }
    let (tv, tv_grad) = if with_grad { tv_loss_grad(x).map(|(l, g)| (l, Some(g)))? } else { (tv_loss(x)?, None) };
    let breakdown = weights.compose(content.as_f64(), style.as_f64(), tv.as_f64());

    let grad = if with_grad {
        let mut g = backbone.backward(&tape, &feature_grads);
        if weights.gamma != 0.0 {
            let mut t = tv_grad.expect("computed with gradient");
            t.scale(T::of(weights.gamma));
            g.add_assign(&t);
        }
        Some(g)
    } else {
        None
    };
    Ok((breakdown, grad))
}

/// Weighted total loss of a generated image `x` against content image `p`
/// and style Grams `a_grams`.
pub fn total_loss<T: Real>(
    p: &Tensor<T>,
    a_grams: &GramMaps<T>,
    x: &Tensor<T>,
    backbone: &Backbone<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    if !p.same_shape(x) {
        return Err(Error::Shape(format!("content {:?} vs generated {:?}", p.shape(), x.shape())));
    }
    let fp = backbone.extract(p, &[weights.content_layer])?;
    let targets = LossTargets { content: &fp[&weights.content_layer], style: a_grams };
    Ok(evaluate(backbone, x, &targets, weights, false)?.0)
}
