//! Layer kernels with hand-written backward passes.
//!
//! Convolutions run as im2col + GEMM over bands of output rows so that the
//! column buffer stays bounded at any resolution. Nearest-neighbour
//! upsampling and padding are folded into the im2col gather, so the
//! resize-conv blocks of the transform network never materialise the
//! upsampled or padded input.

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Upper bound on column-buffer elements per band.
const COL_BUDGET: usize = 1 << 22;

/// Convolutions with at most this many outputs skip im2col in the forward pass.
const DIRECT_MAX_OUT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
    /// Nearest-neighbour upsampling factor applied to the input first.
    pub upsample: usize,
}

impl ConvSpec {
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, pad_mode: PadMode) -> Self {
        Self { in_channels, out_channels, kernel, stride: 1, padding: kernel / 2, pad_mode, upsample: 1 }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output spatial size for an input of `h×w`, or `None` when the kernel
    /// does not fit or reflection padding exceeds the input.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (vh, vw) = (h * self.upsample, w * self.upsample);
        if self.pad_mode == PadMode::Reflect && (self.padding >= vh || self.padding >= vw) {
            return None;
        }
        let (ph, pw) = (vh + 2 * self.padding, vw + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }
}

/// Map a padded virtual coordinate onto the source axis, or `None` for a
/// zero-padded position.
#[inline]
fn source_index(v: isize, virtual_len: usize, upsample: usize, mode: PadMode) -> Option<usize> {
    let n = virtual_len as isize;
    let r = if v < 0 || v >= n {
        match mode {
            PadMode::Zero => return None,
            PadMode::Reflect => {
                if v < 0 {
                    -v
                } else {
                    2 * (n - 1) - v
                }
            }
        }
    } else {
        v
    };
    Some(r as usize / upsample)
}

/// Precomputed gather tables for one axis: `table[k][o]` is the source index
/// feeding output position `o` at kernel offset `k`.
fn axis_table(spec: &ConvSpec, in_len: usize, out_len: usize) -> Vec<Vec<Option<usize>>> {
    let vlen = in_len * spec.upsample;
    (0..spec.kernel)
        .map(|k| {
            (0..out_len)
                .map(|o| {
                    let v = (o * spec.stride + k) as isize - spec.padding as isize;
                    source_index(v, vlen, spec.upsample, spec.pad_mode)
                })
                .collect()
        })
        .collect()
}

struct Gather {
    ys: Vec<Vec<Option<usize>>>,
    xs: Vec<Vec<Option<usize>>>,
    out_h: usize,
    out_w: usize,
}

impl Gather {
    fn new(spec: &ConvSpec, h: usize, w: usize) -> Self {
        let (out_h, out_w) = spec.output_hw(h, w).expect("convolution geometry checked by caller");
        Self { ys: axis_table(spec, h, out_h), xs: axis_table(spec, w, out_w), out_h, out_w }
    }

    fn band_rows(&self, spec: &ConvSpec) -> usize {
        (COL_BUDGET / (spec.patch_len() * self.out_w).max(1)).clamp(1, self.out_h.max(1))
    }

    /// Fill `col` (patch_len × rows·out_w) for output rows `[r0, r1)`.
    fn im2col<T: Real>(&self, spec: &ConvSpec, input: &Tensor<T>, r0: usize, r1: usize, col: &mut [T]) {
        let n = (r1 - r0) * self.out_w;
        let k = spec.kernel;
        let (w, plane) = (input.width(), input.plane_len());
        let data = input.data();
        for c in 0..spec.in_channels {
            let src = &data[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let xt = &self.xs[kx];
                    for (oy, band) in (r0..r1).zip(dst.chunks_exact_mut(self.out_w)) {
                        match self.ys[ky][oy] {
                            None => band.fill(T::zero()),
                            Some(sy) => {
                                let line = &src[sy * w..(sy + 1) * w];
                                for (d, sx) in band.iter_mut().zip(xt) {
                                    *d = match sx {
                                        Some(sx) => line[*sx],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `col` back into `grad` (the transpose of `im2col`).
    fn col2im<T: Real>(&self, spec: &ConvSpec, col: &[T], r0: usize, r1: usize, grad: &mut Tensor<T>) {
        let n = (r1 - r0) * self.out_w;
        let k = spec.kernel;
        let (w, plane) = (grad.width(), grad.plane_len());
        let data = grad.data_mut();
        for c in 0..spec.in_channels {
            let dst = &mut data[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    let xt = &self.xs[kx];
                    for (oy, band) in (r0..r1).zip(src.chunks_exact(self.out_w)) {
                        if let Some(sy) = self.ys[ky][oy] {
                            let line = &mut dst[sy * w..(sy + 1) * w];
                            for (v, sx) in band.iter().zip(xt) {
                                if let Some(sx) = sx {
                                    line[*sx] += *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution parameters: `weight` is `out × in × k × k`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub spec: ConvSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients of one convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(spec: ConvSpec, weight: Vec<T>, bias: Vec<T>) -> Self {
        assert_eq!(weight.len(), spec.weight_len(), "conv weight length");
        assert_eq!(bias.len(), spec.out_channels, "conv bias length");
        Self { spec, weight, bias }
    }

    pub fn zero_grads(&self) -> ConvGrads<T> {
        ConvGrads { weight: vec![T::zero(); self.weight.len()], bias: vec![T::zero(); self.bias.len()] }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, input: &Tensor<T>) -> (usize, usize) {
        assert_eq!(input.channels(), self.spec.in_channels, "conv input channel count");
        self.spec
            .output_hw(input.height(), input.width())
            .unwrap_or_else(|| panic!("input {}x{} too small for {:?}", input.height(), input.width(), self.spec))
    }

    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        let (oh, ow) = self.check_input(input);
        let spec = &self.spec;
        let g = Gather::new(spec, input.height(), input.width());
        if spec.out_channels <= DIRECT_MAX_OUT && spec.stride == 1 && spec.upsample == 1 {
            return self.forward_direct(input, &g);
        }
        let mut out = Tensor::zeros(spec.out_channels, oh, ow);
        let plane = oh * ow;
        let band = g.band_rows(spec);
        let mut col = vec![T::zero(); spec.patch_len() * band * ow];
        let wmat = MatRef::new(&self.weight, spec.out_channels, spec.patch_len());
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + band).min(oh);
            let n = (r1 - r0) * ow;
            let col = &mut col[..spec.patch_len() * n];
            g.im2col(spec, input, r0, r1, col);
            let dst = &mut out.data_mut()[r0 * ow..];
            gemm(T::one(), wmat, MatRef::new(col, spec.patch_len(), n), T::zero(), dst, plane);
            r0 = r1;
        }
        for (o, &b) in self.bias.iter().enumerate() {
            for v in out.plane_mut(o) {
                *v += b;
            }
        }
        out
    }

    /// Row-wise multiply-accumulate without a column buffer. GEMM with a
    /// handful of output rows is dominated by packing the k²-times larger
    /// column matrix, so narrow convolutions take this path.
    fn forward_direct(&self, input: &Tensor<T>, g: &Gather) -> Tensor<T> {
        let spec = &self.spec;
        let (oh, ow) = (g.out_h, g.out_w);
        let (w, k, p) = (input.width(), spec.kernel, spec.padding);
        let mut out = Tensor::zeros(spec.out_channels, oh, ow);
        // Output columns whose every tap lands inside the source row.
        let lo = p.min(ow);
        let hi = (w + p + 1).saturating_sub(k).clamp(lo, ow);
        let mut acc = vec![T::zero(); ow];
        for o in 0..spec.out_channels {
            for oy in 0..oh {
                acc.fill(self.bias[o]);
                for c in 0..spec.in_channels {
                    let plane = input.plane(c);
                    for ky in 0..k {
                        let Some(sy) = g.ys[ky][oy] else { continue };
                        let line = &plane[sy * w..(sy + 1) * w];
                        for kx in 0..k {
                            let wv = self.weight[((o * spec.in_channels + c) * k + ky) * k + kx];
                            let xt = &g.xs[kx];
                            for ox in (0..lo).chain(hi..ow) {
                                if let Some(sx) = xt[ox] {
                                    acc[ox] += wv * line[sx];
                                }
                            }
                            T::axpy(&mut acc[lo..hi], wv, &line[lo + kx - p..hi + kx - p]);
                        }
                    }
                }
                out.plane_mut(o)[oy * ow..(oy + 1) * ow].copy_from_slice(&acc);
            }
        }
        out
    }

    /// Gradient with respect to the input only.
    pub fn backward_input(&self, input_shape: (usize, usize, usize), grad_out: &Tensor<T>) -> Tensor<T> {
        let (c, h, w) = input_shape;
        let spec = &self.spec;
        assert_eq!(c, spec.in_channels);
        let g = Gather::new(spec, h, w);
        assert_eq!((grad_out.height(), grad_out.width()), (g.out_h, g.out_w), "grad shape");
        let mut grad_in = Tensor::zeros(c, h, w);
        let (oh, ow) = (g.out_h, g.out_w);
        let band = g.band_rows(spec);
        let mut col = vec![T::zero(); spec.patch_len() * band * ow];
        let wmat = MatRef::new(&self.weight, spec.out_channels, spec.patch_len());
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + band).min(oh);
            let n = (r1 - r0) * ow;
            let col = &mut col[..spec.patch_len() * n];
            let dy = MatRef { data: &grad_out.data()[r0 * ow..], rows: spec.out_channels, cols: n, stride: oh * ow, transposed: false };
            gemm(T::one(), wmat.t(), dy, T::zero(), col, n);
            g.col2im(spec, col, r0, r1, &mut grad_in);
            r0 = r1;
        }
        grad_in
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut ConvGrads<T>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let (oh, ow) = self.check_input(input);
        assert_eq!((grad_out.height(), grad_out.width()), (oh, ow), "grad shape");
        let spec = &self.spec;
        let g = Gather::new(spec, input.height(), input.width());
        let band = g.band_rows(spec);
        let mut col = vec![T::zero(); spec.patch_len() * band * ow];
        let mut dcol = if need_input { vec![T::zero(); col.len()] } else { Vec::new() };
        let mut grad_in = need_input.then(|| Tensor::zeros(input.channels(), input.height(), input.width()));
        let wmat = MatRef::new(&self.weight, spec.out_channels, spec.patch_len());
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + band).min(oh);
            let n = (r1 - r0) * ow;
            let col = &mut col[..spec.patch_len() * n];
            g.im2col(spec, input, r0, r1, col);
            let dy = MatRef { data: &grad_out.data()[r0 * ow..], rows: spec.out_channels, cols: n, stride: oh * ow, transposed: false };
            gemm(T::one(), dy, MatRef::new(col, spec.patch_len(), n).t(), T::one(), &mut grads.weight, spec.patch_len());
            if let Some(gi) = grad_in.as_mut() {
                let dcol = &mut dcol[..spec.patch_len() * n];
                gemm(T::one(), wmat.t(), dy, T::zero(), dcol, n);
                g.col2im(spec, dcol, r0, r1, gi);
            }
            r0 = r1;
        }
        for (o, gb) in grads.bias.iter_mut().enumerate() {
            *gb += grad_out.plane(o).iter().copied().sum();
        }
        grad_in
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Backward of ReLU given its output (the mask is `output > 0`).
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
/// Returns the pooled tensor and the flat argmax index of every output.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // Strict comparison keeps the first maximum on ties.
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                *out.at_mut(ch, oy, ox) = x.data()[best];
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(input_shape: (usize, usize, usize), argmax: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = input_shape;
    let mut grad = Tensor::zeros(c, h, w);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        grad.data_mut()[i as usize] += g;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution, used as the oracle for the banded
    /// im2col implementation.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let s = conv.spec;
        let (c, h, w) = x.shape();
        let (vh, vw) = (h * s.upsample, w * s.upsample);
        let (oh, ow) = s.output_hw(h, w).unwrap();
        let fetch = |ch: usize, vy: isize, vx: isize| -> f64 {
            let map = |v: isize, n: usize| -> Option<usize> {
                let n = n as isize;
                if v >= 0 && v < n {
                    Some(v as usize)
                } else if s.pad_mode == PadMode::Zero {
                    None
                } else if v < 0 {
                    Some((-v) as usize)
                } else {
                    Some((2 * (n - 1) - v) as usize)
                }
            };
            match (map(vy, vh), map(vx, vw)) {
                (Some(y), Some(x_)) => x.at(ch, y / s.upsample, x_ / s.upsample),
                _ => 0.0,
            }
        };
        Tensor::from_fn(s.out_channels, oh, ow, |o, oy, ox| {
            let mut acc = conv.bias[o];
            for ch in 0..c {
                for ky in 0..s.kernel {
                    for kx in 0..s.kernel {
                        let vy = (oy * s.stride + ky) as isize - s.padding as isize;
                        let vx = (ox * s.stride + kx) as isize - s.padding as isize;
                        let wv = conv.weight[((o * c + ch) * s.kernel + ky) * s.kernel + kx];
                        acc += wv * fetch(ch, vy, vx);
                    }
                }
            }
            acc
        })
    }

    fn random_conv(rng: &mut ChaCha8Rng, spec: ConvSpec) -> Conv2d<f64> {
        let w = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = (0..spec.out_channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Conv2d::new(spec, w, b)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn specs() -> Vec<ConvSpec> {
        vec![
            ConvSpec { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1, pad_mode: PadMode::Zero, upsample: 1 },
            ConvSpec { in_channels: 3, out_channels: 2, kernel: 3, stride: 2, padding: 1, pad_mode: PadMode::Reflect, upsample: 1 },
            ConvSpec { in_channels: 2, out_channels: 2, kernel: 3, stride: 1, padding: 1, pad_mode: PadMode::Reflect, upsample: 2 },
            ConvSpec { in_channels: 1, out_channels: 2, kernel: 5, stride: 1, padding: 2, pad_mode: PadMode::Reflect, upsample: 1 },
        ]
    }

    #[test]
    fn banded_conv_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in specs() {
            let conv = random_conv(&mut rng, spec);
            let x = random_tensor(&mut rng, spec.in_channels, 7, 6);
            let got = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape(), "{spec:?}");
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{spec:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in specs() {
            let conv = random_conv(&mut rng, spec);
            let x = random_tensor(&mut rng, spec.in_channels, 5, 6);
            let probe = random_tensor(&mut rng, spec.out_channels, conv.forward(&x).height(), conv.forward(&x).width());
            let objective = |conv: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
                conv.forward(x).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let mut grads = conv.zero_grads();
            let gx = conv.backward(&x, &probe, &mut grads, true).unwrap();
            let gx_only = conv.backward_input(x.shape(), &probe);
            assert_eq!(gx, gx_only);
            let h = 1e-6;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
                assert!((fd - gx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{spec:?} dx[{i}]");
            }
            for i in 0..conv.weight.len() {
                let mut cp = conv.clone();
                cp.weight[i] += h;
                let mut cm = conv.clone();
                cm.weight[i] -= h;
                let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h);
                assert!((fd - grads.weight[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{spec:?} dw[{i}]");
            }
            for o in 0..spec.out_channels {
                let want: f64 = probe.plane(o).iter().sum();
                assert!((grads.bias[o] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn output_geometry() {
        let s = ConvSpec { in_channels: 1, out_channels: 1, kernel: 3, stride: 2, padding: 1, pad_mode: PadMode::Reflect, upsample: 1 };
        assert_eq!(s.output_hw(64, 64), Some((32, 32)));
        let up = ConvSpec { upsample: 2, stride: 1, ..s };
        assert_eq!(up.output_hw(16, 8), Some((32, 16)));
        // reflection needs at least padding+1 samples
        assert_eq!(ConvSpec::same(1, 1, 9, PadMode::Reflect).output_hw(4, 4), None);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::from_vec(1, 2, 4, vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0]);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[5.0, 9.0]);
        let g = max_pool2_backward(x.shape(), &arg, &Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]));
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn relu_backward_masks_inactive_units() {
        let x = Tensor::<f32>::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]);
        let y = relu(&x);
        let mut g = Tensor::filled(1, 1, 3, 1.0);
        relu_backward(&y, &mut g);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }
}
