//! Shared inputs for the criterion benchmarks in `benches/`.

use nst_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform(-1, 1) tensor, reproducible from `seed`.
pub fn random_tensor(channels: usize, height: usize, width: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(channels, height, width, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Multiply-adds of a stride-1 "same" convolution, counted as 2 flops each.
pub fn conv_flops(in_channels: usize, out_channels: usize, kernel: usize, height: usize, width: usize) -> u64 {
    (2 * in_channels * out_channels * kernel * kernel * height * width) as u64
}
