//! Procedural images for tests, benchmarks and desk-scale experiments.
//!
//! Content images are simple seeded scenes (sky gradient, ground, a few solid
//! shapes) so that content features carry real structure. Style images are
//! periodic or noisy textures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::ImageTensor;

/// A seeded scene: vertical sky gradient, a horizon, and 3–6 shapes.
pub fn content_image(seed: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xc0de);
    let sky_top: [f32; 3] = [rng.gen_range(0.3..0.6), rng.gen_range(0.5..0.8), rng.gen_range(0.8..1.0)];
    let sky_bot: [f32; 3] = [rng.gen_range(0.7..1.0), rng.gen_range(0.7..0.9), rng.gen_range(0.6..0.9)];
    let ground: [f32; 3] = [rng.gen_range(0.1..0.4), rng.gen_range(0.2..0.5), rng.gen_range(0.05..0.3)];
    let horizon = rng.gen_range(0.45..0.75) * height as f32;
    let tilt = rng.gen_range(-0.2..0.2);

    enum Shape {
        Disc { cy: f32, cx: f32, r: f32 },
        Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    }
    let shapes: Vec<(Shape, [f32; 3])> = (0..rng.gen_range(3..=6))
        .map(|_| {
            let colour = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
            let cy = rng.gen_range(0.1..0.9) * height as f32;
            let cx = rng.gen_range(0.1..0.9) * width as f32;
            let size = rng.gen_range(0.08..0.25) * height.min(width) as f32;
            let shape = if rng.gen_bool(0.5) {
                Shape::Disc { cy, cx, r: size }
            } else {
                let aspect = rng.gen_range(0.4..2.5);
                Shape::Rect { y0: cy - size, x0: cx - size * aspect, y1: cy + size, x1: cx + size * aspect }
            };
            (shape, colour)
        })
        .collect();

    ImageTensor::from_fn(height, width, |y, x, c| {
        let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
        let mut v = if yf < horizon + tilt * (xf - width as f32 / 2.0) {
            let t = yf / height as f32;
            sky_top[c] * (1.0 - t) + sky_bot[c] * t
        } else {
            ground[c] * (0.8 + 0.2 * ((xf * 0.7).sin() * (yf * 0.3).cos()))
        };
        for (shape, colour) in &shapes {
            let inside = match *shape {
                Shape::Disc { cy, cx, r } => (yf - cy).powi(2) + (xf - cx).powi(2) <= r * r,
                Shape::Rect { y0, x0, y1, x1 } => yf >= y0 && yf < y1 && xf >= x0 && xf < x1,
            };
            if inside {
                v = colour[c];
            }
        }
        v
    })
}

pub fn content_set(count: usize, height: usize, width: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count as u64).map(|i| content_image(seed.wrapping_add(i), height, width)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    /// Oriented sinusoidal stripes between two colours.
    Stripes { angle: f32, period: f32, a: [f32; 3], b: [f32; 3] },
    /// Hard-edged squares alternating between two colours.
    Checker { cell: usize, a: [f32; 3], b: [f32; 3] },
    /// Overlapping saturated discs on a dark ground.
    Blobs { count: usize, seed: u64 },
    /// Smoothed value noise tinted by a colour.
    Noise { scale: f32, tint: [f32; 3], seed: u64 },
    /// Slow horizontal colour ramp.
    Gradient { from: [f32; 3], to: [f32; 3] },
}

pub fn texture(kind: Texture, height: usize, width: usize) -> ImageTensor {
    match kind {
        Texture::Stripes { angle, period, a, b } => {
            let (s, c) = angle.sin_cos();
            ImageTensor::from_fn(height, width, |y, x, ch| {
                let t = 0.5 + 0.5 * ((x as f32 * c + y as f32 * s) * std::f32::consts::TAU / period).sin();
                a[ch] * t + b[ch] * (1.0 - t)
            })
        }
        Texture::Checker { cell, a, b } => {
            ImageTensor::from_fn(height, width, |y, x, ch| if (y / cell + x / cell) % 2 == 0 { a[ch] } else { b[ch] })
        }
        Texture::Blobs { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..count)
                .map(|_| {
                    let hue = rng.gen_range(0..3);
                    let mut col = [rng.gen_range(0.0..0.3); 3];
                    col[hue] = rng.gen_range(0.7..1.0);
                    (
                        rng.gen_range(0.0..height as f32),
                        rng.gen_range(0.0..width as f32),
                        rng.gen_range(0.04..0.12) * height.min(width) as f32,
                        col,
                    )
                })
                .collect();
            ImageTensor::from_fn(height, width, |y, x, ch| {
                let mut v = 0.08;
                for &(cy, cx, r, col) in &blobs {
                    if (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2) <= r * r {
                        v = col[ch];
                    }
                }
                v
            })
        }
        Texture::Noise { scale, tint, seed } => {
            let gh = (height as f32 / scale).ceil() as usize + 2;
            let gw = (width as f32 / scale).ceil() as usize + 2;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen()).collect();
            let at = |gy: usize, gx: usize| grid[gy * gw + gx];
            ImageTensor::from_fn(height, width, |y, x, ch| {
                let (fy, fx) = (y as f32 / scale, x as f32 / scale);
                let (y0, x0) = (fy as usize, fx as usize);
                let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                let (ty, tx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                let n = top * (1.0 - ty) + bot * ty;
                (0.15 + 0.85 * n) * tint[ch]
            })
        }
        Texture::Gradient { from, to } => ImageTensor::from_fn(height, width, |_, x, ch| {
            let t = x as f32 / (width.max(2) - 1) as f32;
            from[ch] * (1.0 - t) + to[ch] * t
        }),
    }
}

/// Three closely related stripe textures (same palette, similar angle and
/// period).
pub fn consistent_style_set(height: usize, width: usize) -> Vec<ImageTensor> {
    let (a, b) = ([0.75, 0.35, 0.15], [0.25, 0.12, 0.08]);
    [(0.50, 8.0), (0.60, 8.5), (0.45, 7.5)]
        .into_iter()
        .map(|(angle, period)| texture(Texture::Stripes { angle, period, a, b }, height, width))
        .collect()
}

/// Three textures with nothing in common: a black/white checker, a pastel
/// ramp and saturated blobs.
pub fn mixed_style_set(height: usize, width: usize) -> Vec<ImageTensor> {
    vec![
        texture(Texture::Checker { cell: 4, a: [0.0; 3], b: [1.0; 3] }, height, width),
        texture(Texture::Gradient { from: [0.9, 0.8, 0.95], to: [0.7, 0.9, 0.8] }, height, width),
        texture(Texture::Blobs { count: 40, seed: 11 }, height, width),
    ]
}

/// Default style used by desk-scale runs: rust-tinted noise over stripes.
pub fn default_style(height: usize, width: usize) -> ImageTensor {
    let stripes = texture(
        Texture::Stripes { angle: 0.7, period: 6.0, a: [0.95, 0.55, 0.15], b: [0.1, 0.15, 0.35] },
        height,
        width,
    );
    let noise = texture(Texture::Noise { scale: 5.0, tint: [1.0, 0.9, 0.8], seed: 3 }, height, width);
    ImageTensor::from_fn(height, width, |y, x, c| stripes.get(y, x, c) * noise.get(y, x, c))
}
