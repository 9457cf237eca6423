//! Independent oracles and desk-scale fixtures shared by the integration
//! tests and the acceptance runner.
//!
//! The oracles are plain loops over nested `Vec`s written from the loss
//! definitions; they share no code with the crate.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nst_core::backbone::FeatureMap;
use nst_core::losses::GramMatrix;
use nst_core::trainer::{PreparedStyle, StyleSpec, TrainConfig};
use nst_core::{fixtures, ArchConfig, Backbone, ImageTensor, LayerId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows[i][k]` = channel i, position k.
pub type Matrix = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
    (0..n).map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

pub fn feature_map(layer: LayerId, rows: &Matrix) -> FeatureMap<f64> {
    let (n, m) = (rows.len(), rows[0].len());
    FeatureMap::from_matrix(layer, n, m, rows.iter().flatten().copied().collect())
}

pub fn oracle_gram(f: &Matrix) -> Matrix {
    let n = f.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..f[i].len() {
                g[i][j] += f[i][k] * f[j][k];
            }
        }
    }
    g
}

pub fn oracle_content(fp: &Matrix, fx: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..fp.len() {
        for j in 0..fp[i].len() {
            s += (fx[i][j] - fp[i][j]).powi(2);
        }
    }
    0.5 * s
}

/// One term per layer: (style features, generated features, w_l).
pub fn oracle_style(layers: &[(Matrix, Matrix, f64)]) -> f64 {
    let mut total = 0.0;
    for (fa, fx, w) in layers {
        let (ga, gx) = (oracle_gram(fa), oracle_gram(fx));
        let n = fx.len() as f64;
        let m = fx[0].len() as f64;
        let mut s = 0.0;
        for i in 0..ga.len() {
            for j in 0..ga.len() {
                s += (gx[i][j] - ga[i][j]).powi(2);
            }
        }
        total += w * s / (4.0 * n * n * m * m);
    }
    total
}

/// `img[c][y][x]`; neighbour differences outside the image count as zero.
pub fn oracle_tv(img: &[Matrix]) -> f64 {
    let mut total = 0.0;
    for plane in img {
        let h = plane.len();
        let w = plane[0].len();
        for i in 0..h {
            for j in 0..w {
                let dx = if j + 1 < w { plane[i][j + 1] - plane[i][j] } else { 0.0 };
                let dy = if i + 1 < h { plane[i + 1][j] - plane[i][j] } else { 0.0 };
                total += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    total
}

pub fn image_planes(t: &Tensor<f64>) -> Vec<Matrix> {
    let (c, h, w) = t.shape();
    (0..c).map(|ch| (0..h).map(|y| (0..w).map(|x| t.at(ch, y, x)).collect()).collect()).collect()
}

pub fn gram_of(layer: LayerId, rows: &Matrix) -> GramMatrix<f64> {
    let g = oracle_gram(rows);
    GramMatrix { layer, channels: rows.len(), positions: rows[0].len(), data: g.into_iter().flatten().collect() }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central differences of `f` at every index in `coords`.
pub fn central_differences(x: &[f64], coords: &[usize], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖).
pub fn vector_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        diff / na.max(nb)
    }
}

pub fn layer(s: &str) -> LayerId {
    s.parse().unwrap()
}

pub fn layers(names: &[&str]) -> Vec<LayerId> {
    names.iter().map(|s| layer(s)).collect()
}

/// Reduced transform network used by every desk-scale run.
pub fn small_arch() -> ArchConfig {
    ArchConfig { base_channels: 16, residual_blocks: 3, ..ArchConfig::default() }
}

/// Synthetic backbone deep enough for conv4_3.
pub fn backbone() -> Backbone<f32> {
    Backbone::synthetic(0, 10)
}

/// Desk-scale training config: small network, square crops, quiet logs.
pub fn tiny_config(side: usize, batch: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        arch: small_arch(),
        epochs,
        batch_size: batch,
        train_resolution: (side, side),
        log_every: 0,
        seed,
        ..TrainConfig::default()
    }
}

pub fn prepared_style(backbone: &Backbone<f32>, cfg: &TrainConfig, id: &str, image: ImageTensor) -> PreparedStyle {
    PreparedStyle::new(backbone, StyleSpec::new(id, format!("{id}.png")), image, &cfg.weights).unwrap()
}

pub fn default_style(backbone: &Backbone<f32>, cfg: &TrainConfig) -> PreparedStyle {
    let (h, w) = cfg.train_resolution;
    prepared_style(backbone, cfg, "style", fixtures::default_style(h, w))
}

pub fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64
}

pub fn tv_of(img: &Tensor<f32>) -> f64 {
    nst_core::tv_loss(img).unwrap() as f64
}

/// Per-layer grams keyed by layer for the oracle/crate comparison.
pub fn gram_maps(entries: &[(LayerId, &Matrix)]) -> BTreeMap<LayerId, GramMatrix<f64>> {
    entries.iter().map(|(l, m)| (*l, gram_of(*l, m))).collect()
}

pub mod http;
