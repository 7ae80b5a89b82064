//! Network building blocks with hand-written reverse passes.
//!
//! Layers cache what their backward pass needs during a training-mode forward
//! and release it in `backward`. Work is split per sample across the rayon
//! pool; per-sample parameter gradients are reduced in sample order, so the
//! result does not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{count, lit, ordered_sum, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    fn uniform<R: Rng>(len: usize, bound: f64, rng: &mut R) -> Self {
        Self::new(
            (0..len)
                .map(|_| lit(rng.gen_range(-bound..=bound)))
                .collect(),
        )
    }
}

/// Gathers `k x k` windows of a `c x h x w` image into a `(c k k) x (oh ow)` matrix.
///
/// Window `(oy, ox)` reads source pixel `(stride*oy + ky - pad, stride*ox + kx - pad)`;
/// reads outside the image yield zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let img = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                let (lo, hi) = valid_range(kx, stride, pad, w, ow);
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (stride * oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &img[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                    dst[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if stride == 1 {
                        let start = lo + kx - pad;
                        dst[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = srow[stride * ox + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a `c x h x w` image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let img = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                let (lo, hi) = valid_range(kx, stride, pad, w, ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (stride * oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let drow = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for ox in lo..hi {
                        drow[stride * ox + kx - pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Output columns `ox` in `[lo, hi)` whose source column `stride*ox + kx - pad` lies in `[0, w)`.
#[inline]
fn valid_range(kx: usize, stride: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi = if w + pad > kx {
        ((w - 1 + pad - kx) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(ow), hi)
}

/// Sampling geometry of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Stride 1, zero padding `k / 2`: output keeps the input size.
    Same,
    /// Transposed convolution with stride 2, cropped to exactly twice the input size.
    Up,
}

/// 2-D convolution. Weights are `cout x (cin k k)` for [`ConvKind::Same`] and
/// `cin x (cout k k)` for [`ConvKind::Up`].
#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

// Full transposed-conv output is 2h + k - 2; this many rows/cols are cropped at the start.
const UP_STRIDE: usize = 2;

impl<T: Scalar> Conv<T> {
    pub fn new<R: Rng>(
        kind: ConvKind,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = match kind {
            ConvKind::Same => cin * k * k,
            // each output pixel of a stride-2 transposed conv sees about a quarter of the taps
            ConvKind::Up => (cin * k * k).div_ceil(UP_STRIDE * UP_STRIDE),
        };
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let weight = Param::uniform(cin * cout * k * k, bound, rng);
        Self {
            kind,
            cin,
            cout,
            k,
            weight,
            bias: bias.then(|| Param::new(vec![T::zero(); cout])),
            input: None,
        }
    }

    fn pad(&self) -> usize {
        match self.kind {
            ConvKind::Same => self.k / 2,
            ConvKind::Up => (self.k - 1) / 2 - 1,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            ConvKind::Same => (h, w),
            ConvKind::Up => (UP_STRIDE * h, UP_STRIDE * w),
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, train: bool) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.output_dims(x.h, x.w);
        let mut out = Tensor::zeros(x.n, self.cout, oh, ow);
        let (k, pad, cin, cout) = (self.k, self.pad(), self.cin, self.cout);
        let kk = cin * k * k;
        let w = &self.weight.value;
        let in_len = x.sample_len();
        let (h_in, w_in, plane_in) = (x.h, x.w, x.plane());
        let cols_len = match self.kind {
            ConvKind::Same if k == 1 => 0,
            ConvKind::Same => kk * oh * ow,
            ConvKind::Up => cout * k * k * plane_in,
        };
        // One scratch matrix per worker, reused across the samples it handles.
        out.data
            .par_chunks_mut(cout * oh * ow)
            .zip(x.data.par_chunks(in_len))
            .for_each_init(
                || vec![T::zero(); cols_len],
                |cols, (dst, src)| match self.kind {
                    ConvKind::Same => {
                        if k == 1 {
                            T::gemm(
                                cout,
                                cin,
                                oh * ow,
                                T::one(),
                                w,
                                false,
                                src,
                                false,
                                T::zero(),
                                dst,
                            );
                        } else {
                            im2col(src, cin, h_in, w_in, k, 1, pad, oh, ow, cols);
                            T::gemm(
                                cout,
                                kk,
                                oh * ow,
                                T::one(),
                                w,
                                false,
                                cols,
                                false,
                                T::zero(),
                                dst,
                            );
                        }
                    }
                    ConvKind::Up => {
                        T::gemm(
                            cout * k * k,
                            cin,
                            plane_in,
                            T::one(),
                            w,
                            true,
                            src,
                            false,
                            T::zero(),
                            cols,
                        );
                        col2im(cols, cout, oh, ow, k, UP_STRIDE, pad, h_in, w_in, dst);
                    }
                },
            );
        if let Some(b) = &self.bias {
            let plane = oh * ow;
            for (i, chunk) in out.data.chunks_mut(plane).enumerate() {
                let bv = b.value[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        if train {
            self.input = Some(x);
        }
        out
    }

    /// Accumulates parameter gradients and returns the gradient with respect to the input.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| {
            Error::State("conv backward without a cached training forward".into())
        })?;
        let (k, pad, cin, cout) = (self.k, self.pad(), self.cin, self.cout);
        let (oh, ow) = (dy.h, dy.w);
        let (h_in, w_in, plane_in) = (x.h, x.w, x.plane());
        let kk = cin * k * k;
        let wlen = self.weight.value.len();
        let w = &self.weight.value;
        let mut dx = Tensor::zeros(x.n, cin, x.h, x.w);
        let in_len = x.sample_len();
        let cols_len = match self.kind {
            ConvKind::Same if k == 1 => 0,
            ConvKind::Same => kk * oh * ow,
            ConvKind::Up => cout * k * k * plane_in,
        };
        let per_sample: Vec<Vec<T>> = dx
            .data
            .par_chunks_mut(in_len)
            .zip(x.data.par_chunks(in_len))
            .zip(dy.data.par_chunks(cout * oh * ow))
            .map_init(
                || vec![T::zero(); cols_len],
                |cols, ((dxs, xs), dys)| {
                    let mut dw = vec![T::zero(); wlen];
                    match self.kind {
                        ConvKind::Same if k == 1 => {
                            T::gemm(
                                cout,
                                oh * ow,
                                cin,
                                T::one(),
                                dys,
                                false,
                                xs,
                                true,
                                T::zero(),
                                &mut dw,
                            );
                            T::gemm(
                                cin,
                                cout,
                                oh * ow,
                                T::one(),
                                w,
                                true,
                                dys,
                                false,
                                T::zero(),
                                dxs,
                            );
                        }
                        ConvKind::Same => {
                            im2col(xs, cin, h_in, w_in, k, 1, pad, oh, ow, cols);
                            T::gemm(
                                cout,
                                oh * ow,
                                kk,
                                T::one(),
                                dys,
                                false,
                                cols,
                                true,
                                T::zero(),
                                &mut dw,
                            );
                            T::gemm(
                                kk,
                                cout,
                                oh * ow,
                                T::one(),
                                w,
                                true,
                                dys,
                                false,
                                T::zero(),
                                cols,
                            );
                            col2im(cols, cin, h_in, w_in, k, 1, pad, oh, ow, dxs);
                        }
                        ConvKind::Up => {
                            im2col(dys, cout, oh, ow, k, UP_STRIDE, pad, h_in, w_in, cols);
                            T::gemm(
                                cin,
                                cout * k * k,
                                plane_in,
                                T::one(),
                                w,
                                false,
                                cols,
                                false,
                                T::zero(),
                                dxs,
                            );
                            T::gemm(
                                cin,
                                plane_in,
                                cout * k * k,
                                T::one(),
                                xs,
                                false,
                                cols,
                                true,
                                T::zero(),
                                &mut dw,
                            );
                        }
                    }
                    dw
                },
            )
            .collect();
        for dw in &per_sample {
            for (g, &d) in self.weight.grad.iter_mut().zip(dw) {
                *g += d;
            }
        }
        if let Some(b) = &mut self.bias {
            let plane = oh * ow;
            for co in 0..cout {
                let mut acc = T::zero();
                for n in 0..dy.n {
                    let s = &dy.data[(n * cout + co) * plane..(n * cout + co + 1) * plane];
                    acc += ordered_sum(plane, |i| s[i]);
                }
                b.grad[co] += acc;
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

/// Convolution, per-channel batch normalization and leaky rectifier.
#[derive(Debug, Clone)]
pub struct ConvUnit<T> {
    pub conv: Conv<T>,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    alpha: T,
    momentum: T,
    eps: T,
    /// Normalized pre-activations and per-channel `1 / sqrt(var + eps)` from the last training forward.
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> ConvUnit<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        kind: ConvKind,
        cin: usize,
        cout: usize,
        k: usize,
        alpha: f64,
        momentum: f64,
        eps: f64,
        rng: &mut R,
    ) -> Self {
        // He-style gain for a leaky rectifier
        let gain = (2.0 / (1.0 + alpha * alpha)).sqrt();
        Self {
            conv: Conv::new(kind, cin, cout, k, false, gain, rng),
            gamma: Param::new(vec![T::one(); cout]),
            beta: Param::new(vec![T::zero(); cout]),
            running_mean: vec![T::zero(); cout],
            running_var: vec![T::one(); cout],
            alpha: lit(alpha),
            momentum: lit(momentum),
            eps: lit(eps),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, train: bool) -> Tensor<T> {
        let mut z = self.conv.forward(x, train);
        let c = z.c;
        let plane = z.plane();
        let (mean, inv_std) = if train {
            let m = count::<T>(z.n * plane);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for n in 0..z.n {
                    let sl = &z.data[(n * c + ch) * plane..][..plane];
                    s += ordered_sum(plane, |i| sl[i]);
                }
                mean[ch] = s / m;
                let mu = mean[ch];
                let mut v = T::zero();
                for n in 0..z.n {
                    let sl = &z.data[(n * c + ch) * plane..][..plane];
                    v += ordered_sum(plane, |i| (sl[i] - mu) * (sl[i] - mu));
                }
                var[ch] = v / m;
            }
            for ch in 0..c {
                let keep = T::one() - self.momentum;
                self.running_mean[ch] = keep * self.running_mean[ch] + self.momentum * mean[ch];
                self.running_var[ch] = keep * self.running_var[ch] + self.momentum * var[ch];
            }
            let inv_std: Vec<T> = var
                .iter()
                .map(|&v| T::one() / (v + self.eps).sqrt())
                .collect();
            (mean, inv_std)
        } else {
            let inv_std = self
                .running_var
                .iter()
                .map(|&v| T::one() / (v + self.eps).sqrt())
                .collect();
            (self.running_mean.clone(), inv_std)
        };
        for (i, chunk) in z.data.chunks_mut(plane).enumerate() {
            let ch = i % c;
            let (mu, is) = (mean[ch], inv_std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - mu) * is);
        }
        let mut y = Tensor::zeros(z.n, c, z.h, z.w);
        let alpha = self.alpha;
        for (i, (dst, src)) in y
            .data
            .chunks_mut(plane)
            .zip(z.data.chunks(plane))
            .enumerate()
        {
            let ch = i % c;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for (d, &xh) in dst.iter_mut().zip(src) {
                let pre = g * xh + b;
                *d = if pre > T::zero() { pre } else { alpha * pre };
            }
        }
        if train {
            self.cache = Some((z, inv_std));
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv_std) = self.cache.take().ok_or_else(|| {
            Error::State("unit backward without a cached training forward".into())
        })?;
        let c = xhat.c;
        let plane = xhat.plane();
        let m = count::<T>(xhat.n * plane);
        let alpha = self.alpha;
        // gradient at the normalized-and-affine pre-activation
        let mut dz = dy.clone();
        for (i, (d, xh)) in dz
            .data
            .chunks_mut(plane)
            .zip(xhat.data.chunks(plane))
            .enumerate()
        {
            let ch = i % c;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for (dv, &x) in d.iter_mut().zip(xh) {
                if g * x + b <= T::zero() {
                    *dv *= alpha;
                }
            }
        }
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            for n in 0..xhat.n {
                let off = (n * c + ch) * plane;
                let (d, x) = (&dz.data[off..off + plane], &xhat.data[off..off + plane]);
                dbeta[ch] += ordered_sum(plane, |i| d[i]);
                dgamma[ch] += ordered_sum(plane, |i| d[i] * x[i]);
            }
            self.gamma.grad[ch] += dgamma[ch];
            self.beta.grad[ch] += dbeta[ch];
        }
        for (i, (d, xh)) in dz
            .data
            .chunks_mut(plane)
            .zip(xhat.data.chunks(plane))
            .enumerate()
        {
            let ch = i % c;
            let scale = self.gamma.value[ch] * inv_std[ch] / m;
            let (sb, sg) = (dbeta[ch], dgamma[ch]);
            for (dv, &x) in d.iter_mut().zip(xh) {
                *dv = scale * (m * *dv - sb - x * sg);
            }
        }
        self.conv.backward(&dz)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv.params();
        p.push(&self.gamma);
        p.push(&self.beta);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv.params_mut();
        p.push(&mut self.gamma);
        p.push(&mut self.beta);
        p
    }

    pub fn buffers(&self) -> Vec<&Vec<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

type Shape4 = (usize, usize, usize, usize);

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    /// Input shape and the winning tap (0..4) of every output pixel.
    cache: Option<(Shape4, Vec<u8>)>,
}

impl MaxPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let mut arg = if train {
            vec![0u8; out.data.len()]
        } else {
            Vec::new()
        };
        for p in 0..x.n * x.c {
            let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * x.w + 2 * ox;
                    let taps = [
                        src[base],
                        src[base + 1],
                        src[base + x.w],
                        src[base + x.w + 1],
                    ];
                    let mut best = 0;
                    for t in 1..4 {
                        if taps[t] > taps[best] {
                            best = t;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out.data[o] = taps[best];
                    if train {
                        arg[o] = best as u8;
                    }
                }
            }
        }
        if train {
            self.cache = Some(((x.n, x.c, x.h, x.w), arg));
        }
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let ((n, c, h, w), arg) = self.cache.take().ok_or_else(|| {
            Error::State("pool backward without a cached training forward".into())
        })?;
        let mut dx = Tensor::zeros(n, c, h, w);
        let (oh, ow) = (h / 2, w / 2);
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = p * oh * ow + oy * ow + ox;
                    let t = arg[o] as usize;
                    let idx = p * h * w + (2 * oy + t / 2) * w + 2 * ox + t % 2;
                    dx.data[idx] += dy.data[o];
                }
            }
        }
        Ok(dx)
    }
}
