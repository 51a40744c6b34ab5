//! Layers with hand-written backward passes.
//!
//! Every layer has an inference forward (`forward`) that borrows weights
//! immutably, a training forward that returns whatever the backward pass
//! needs, and a backward that accumulates into parameter gradients.
//! Reductions over the batch run in a fixed order, so results do not depend
//! on the thread count.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use super::tensor::{gemm, Tensor};

/// Batch split used for parallel weight-gradient accumulation. Fixed so the
/// summation order never depends on the machine.
const GRAD_CHUNKS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Named traversal over trainable parameters and non-trainable buffers.
pub trait Visit {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Vec<f32>)) {}
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[cout, cin * k * k]`
    pub weight: Param,
}

/// Output-column range `[lo, hi)` for which `o * stride + offset - pad`
/// lands inside `[0, len)`.
fn valid_range(len: usize, out: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = if len + pad > offset {
        ((len + pad - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl Conv2d {
    /// He-normal initialization scaled by fan-out.
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (cout * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = (0..cout * cin * k * k).map(|_| normal.sample(rng) as f32).collect();
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Param::new(weight),
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad).saturating_sub(self.k) / self.stride + 1,
            (w + 2 * self.pad).saturating_sub(self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [f32]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let l = ho * wo;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(h, ho, s, ky, p);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_range(w, wo, s, kx, p);
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    dst.fill(0.0);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let src = &plane[iy * w..(iy + 1) * w];
                        let d = &mut dst[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            d[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                d[ox] = src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let l = ho * wo;
        for c in 0..self.cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(h, ho, s, ky, p);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_range(w, wo, s, kx, p);
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        for ox in ox_lo..ox_hi {
                            dst[ox * s + kx - p] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_dims(x.h, x.w);
        let mut out = Tensor::zeros(x.n, self.cout, ho, wo);
        let ckk = self.cin * self.k * self.k;
        let l = ho * wo;
        let out_len = self.cout * l;
        out.data.par_chunks_mut(out_len).enumerate().for_each(|(i, out_s)| {
            let xs = x.sample(i);
            if self.is_pointwise() {
                gemm(self.cout, ckk, l, 1.0, &self.weight.value, false, xs, false, 0.0, out_s);
            } else {
                let mut cols = vec![0.0; ckk * l];
                self.im2col(xs, x.h, x.w, ho, wo, &mut cols);
                gemm(self.cout, ckk, l, 1.0, &self.weight.value, false, &cols, false, 0.0, out_s);
            }
        });
        out
    }

    /// Accumulate the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (ho, wo) = (dy.h, dy.w);
        let ckk = self.cin * self.k * self.k;
        let l = ho * wo;
        let per = x.n.div_ceil(GRAD_CHUNKS).max(1);
        let this = &*self;
        let partials: Vec<(Vec<f32>, Vec<f32>)> = (0..x.n.div_ceil(per))
            .into_par_iter()
            .map(|chunk| {
                let mut dw = vec![0.0; this.cout * ckk];
                let lo = chunk * per;
                let hi = (lo + per).min(x.n);
                let mut dx = if need_dx { vec![0.0; (hi - lo) * x.sample_len()] } else { Vec::new() };
                let mut cols = if this.is_pointwise() { Vec::new() } else { vec![0.0; ckk * l] };
                let mut dcols = if need_dx && !this.is_pointwise() { vec![0.0; ckk * l] } else { Vec::new() };
                for i in lo..hi {
                    let xs = x.sample(i);
                    let dys = dy.sample(i);
                    let cols_ref: &[f32] = if this.is_pointwise() {
                        xs
                    } else {
                        this.im2col(xs, x.h, x.w, ho, wo, &mut cols);
                        &cols
                    };
                    gemm(this.cout, l, ckk, 1.0, dys, false, cols_ref, true, 1.0, &mut dw);
                    if need_dx {
                        let dxs = &mut dx[(i - lo) * x.sample_len()..(i - lo + 1) * x.sample_len()];
                        if this.is_pointwise() {
                            gemm(ckk, this.cout, l, 1.0, &this.weight.value, true, dys, false, 0.0, dxs);
                        } else {
                            gemm(ckk, this.cout, l, 1.0, &this.weight.value, true, dys, false, 0.0, &mut dcols);
                            this.col2im(&dcols, x.h, x.w, ho, wo, dxs);
                        }
                    }
                }
                (dw, dx)
            })
            .collect();
        let mut dx_all = need_dx.then(|| Vec::with_capacity(x.data.len()));
        for (dw, dx) in partials {
            for (g, d) in self.weight.grad.iter_mut().zip(&dw) {
                *g += d;
            }
            if let Some(all) = dx_all.as_mut() {
                all.extend_from_slice(&dx);
            }
        }
        dx_all.map(|data| Tensor {
            n: x.n,
            c: x.c,
            h: x.h,
            w: x.w,
            data,
        })
    }
}

impl Visit for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub c: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

pub struct BnCache {
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            gamma: Param::new(vec![1.0; c]),
            beta: Param::new(vec![0.0; c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        let plane = x.plane();
        for (i, v) in y.data.iter_mut().enumerate() {
            let c = (i / plane) % self.c;
            let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
            *v = self.gamma.value[c] * (*v - self.running_mean[c]) * inv + self.beta.value[c];
        }
        y
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let plane = x.plane();
        let count = (x.n * plane) as f64;
        let mut mean = vec![0.0f64; self.c];
        let mut var = vec![0.0f64; self.c];
        for i in 0..x.n {
            for c in 0..self.c {
                let off = (i * self.c + c) * plane;
                mean[c] += x.data[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..x.n {
            for c in 0..self.c {
                let off = (i * self.c + c) * plane;
                var[c] += x.data[off..off + plane]
                    .iter()
                    .map(|&v| (v as f64 - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + self.eps as f64).sqrt()) as f32).collect();
        let mut x_hat = vec![0.0f32; x.data.len()];
        let mut y = x.zeros_like();
        for (idx, (&v, (xh, yv))) in x.data.iter().zip(x_hat.iter_mut().zip(y.data.iter_mut())).enumerate() {
            let c = (idx / plane) % self.c;
            *xh = ((v as f64 - mean[c]) as f32) * inv_std[c];
            *yv = self.gamma.value[c] * *xh + self.beta.value[c];
        }
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for c in 0..self.c {
            let m = self.momentum as f64;
            self.running_mean[c] = ((1.0 - m) * self.running_mean[c] as f64 + m * mean[c]) as f32;
            self.running_var[c] = ((1.0 - m) * self.running_var[c] as f64 + m * var[c] * unbias) as f32;
        }
        (y, BnCache { x_hat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let plane = dy.plane();
        let count = (dy.n * plane) as f64;
        let mut sum_dy = vec![0.0f64; self.c];
        let mut sum_dy_xhat = vec![0.0f64; self.c];
        for i in 0..dy.n {
            for c in 0..self.c {
                let off = (i * self.c + c) * plane;
                for j in off..off + plane {
                    sum_dy[c] += dy.data[j] as f64;
                    sum_dy_xhat[c] += dy.data[j] as f64 * cache.x_hat[j] as f64;
                }
            }
        }
        for c in 0..self.c {
            self.beta.grad[c] += sum_dy[c] as f32;
            self.gamma.grad[c] += sum_dy_xhat[c] as f32;
        }
        let mut dx = dy.zeros_like();
        for (idx, v) in dx.data.iter_mut().enumerate() {
            let c = (idx / plane) % self.c;
            let g = self.gamma.value[c] as f64 * cache.inv_std[c] as f64 / count;
            *v = (g * (count * dy.data[idx] as f64 - sum_dy[c] - cache.x_hat[idx] as f64 * sum_dy_xhat[c])) as f32;
        }
        dx
    }
}

impl Visit for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>)) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient of ReLU given its output.
pub fn relu_backward(dy: &mut [f32], y: &[f32]) {
    for (d, &o) in dy.iter_mut().zip(y) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn leaky_relu_inplace(x: &mut [f32], slope: f32) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= slope
        }
    });
}

/// Gradient of Leaky ReLU given its input.
pub fn leaky_relu_backward(dy: &mut [f32], pre: &[f32], slope: f32) {
    for (d, &p) in dy.iter_mut().zip(pre) {
        if p < 0.0 {
            *d *= slope;
        }
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

// ---------------------------------------------------------------------------
// Max pooling (ceil mode, no padding)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
}

/// Ceil-mode output length: the last window may hang off the edge but must
/// start inside the input.
pub fn ceil_pool_len(len: usize, k: usize, stride: usize) -> usize {
    if len <= k {
        return 1;
    }
    let mut out = (len - k).div_ceil(stride) + 1;
    if (out - 1) * stride >= len {
        out -= 1;
    }
    out
}

impl MaxPool2d {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (ceil_pool_len(h, self.k, self.stride), ceil_pool_len(w, self.k, self.stride))
    }

    fn run(&self, x: &Tensor, argmax: Option<&mut Vec<u32>>) -> Tensor {
        let (ho, wo) = self.out_dims(x.h, x.w);
        let mut out = Tensor::zeros(x.n, x.c, ho, wo);
        let mut arg = vec![0u32; out.data.len()];
        for p in 0..x.n * x.c {
            let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
            for oy in 0..ho {
                let y0 = oy * self.stride;
                let y1 = (y0 + self.k).min(x.h);
                for ox in 0..wo {
                    let x0 = ox * self.stride;
                    let x1 = (x0 + self.k).min(x.w);
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = y0 * x.w + x0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = src[iy * x.w + ix];
                            if v > best {
                                best = v;
                                best_i = iy * x.w + ix;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out.data[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
        if let Some(a) = argmax {
            *a = arg;
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x, None)
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, Vec<u32>) {
        let mut arg = Vec::new();
        let y = self.run(x, Some(&mut arg));
        (y, arg)
    }

    pub fn backward(&self, argmax: &[u32], dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
        let mut dx = Tensor::zeros(dy.n, dy.c, in_h, in_w);
        let out_plane = dy.plane();
        for (o, (&g, &a)) in dy.data.iter().zip(argmax).enumerate() {
            let p = o / out_plane;
            dx.data[p * in_h * in_w + a as usize] += g;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub c: usize,
    pub hidden: usize,
    /// `[hidden, c]`
    pub w1: Param,
    pub b1: Param,
    /// `[c, hidden]`
    pub w2: Param,
    pub b2: Param,
}

pub struct SeCache {
    z: Vec<f32>,
    h: Vec<f32>,
    s: Vec<f32>,
}

impl SeCache {
    /// The gates applied, `[n, c]` row-major.
    pub fn gates(&self) -> &[f32] {
        &self.s
    }
}

fn uniform_init(fan_in: usize, len: usize, rng: &mut impl Rng) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..len).map(|_| dist.sample(rng)).collect()
}

impl SqueezeExcite {
    pub fn new(c: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = (c / reduction.max(1)).max(1);
        Self {
            c,
            hidden,
            w1: Param::new(uniform_init(c, hidden * c, rng)),
            b1: Param::new(uniform_init(c, hidden, rng)),
            w2: Param::new(uniform_init(hidden, c * hidden, rng)),
            b2: Param::new(uniform_init(hidden, c, rng)),
        }
    }

    /// Per-channel gates in (0, 1) for every sample, plus the squeeze and
    /// hidden activations.
    fn gates(&self, x: &Tensor) -> SeCache {
        let plane = x.plane() as f64;
        let mut z = vec![0.0f32; x.n * self.c];
        for (p, zv) in z.iter_mut().enumerate() {
            let off = p * x.plane();
            *zv = (x.data[off..off + x.plane()].iter().map(|&v| v as f64).sum::<f64>() / plane) as f32;
        }
        let mut h = vec![0.0f32; x.n * self.hidden];
        let mut s = vec![0.0f32; x.n * self.c];
        for i in 0..x.n {
            let zi = &z[i * self.c..(i + 1) * self.c];
            for j in 0..self.hidden {
                let row = &self.w1.value[j * self.c..(j + 1) * self.c];
                let pre: f32 = row.iter().zip(zi).map(|(w, v)| w * v).sum::<f32>() + self.b1.value[j];
                h[i * self.hidden + j] = pre.max(0.0);
            }
            let hi = &h[i * self.hidden..(i + 1) * self.hidden];
            for c in 0..self.c {
                let row = &self.w2.value[c * self.hidden..(c + 1) * self.hidden];
                let pre: f32 = row.iter().zip(hi).map(|(w, v)| w * v).sum::<f32>() + self.b2.value[c];
                s[i * self.c + c] = sigmoid(pre);
            }
        }
        SeCache { z, h, s }
    }

    fn scale(x: &Tensor, s: &[f32]) -> Tensor {
        let mut y = x.clone();
        let plane = x.plane();
        for (p, chunk) in y.data.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= s[p]);
        }
        y
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        Self::scale(x, &self.gates(x).s)
    }

    /// Per-sample, per-channel gate values (for inspection and tests).
    pub fn gate_values(&self, x: &Tensor) -> Vec<f32> {
        self.gates(x).s
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, SeCache) {
        let cache = self.gates(x);
        (Self::scale(x, &cache.s), cache)
    }

    pub fn backward(&mut self, x: &Tensor, cache: &SeCache, dy: &Tensor) -> Tensor {
        let plane = x.plane();
        let mut dx = Self::scale(dy, &cache.s);
        for i in 0..x.n {
            // gradient w.r.t. the gate pre-activations
            let mut dpre2 = vec![0.0f32; self.c];
            for c in 0..self.c {
                let p = i * self.c + c;
                let off = p * plane;
                let ds: f64 = dy.data[off..off + plane]
                    .iter()
                    .zip(&x.data[off..off + plane])
                    .map(|(&d, &v)| d as f64 * v as f64)
                    .sum();
                let s = cache.s[p];
                dpre2[c] = ds as f32 * s * (1.0 - s);
            }
            let hi = &cache.h[i * self.hidden..(i + 1) * self.hidden];
            let mut dh = vec![0.0f32; self.hidden];
            for c in 0..self.c {
                self.b2.grad[c] += dpre2[c];
                for j in 0..self.hidden {
                    self.w2.grad[c * self.hidden + j] += dpre2[c] * hi[j];
                    dh[j] += self.w2.value[c * self.hidden + j] * dpre2[c];
                }
            }
            let zi = &cache.z[i * self.c..(i + 1) * self.c];
            let mut dz = vec![0.0f32; self.c];
            for j in 0..self.hidden {
                let dpre1 = if hi[j] > 0.0 { dh[j] } else { 0.0 };
                self.b1.grad[j] += dpre1;
                for c in 0..self.c {
                    self.w1.grad[j * self.c + c] += dpre1 * zi[c];
                    dz[c] += self.w1.value[j * self.c + c] * dpre1;
                }
            }
            for c in 0..self.c {
                let off = (i * self.c + c) * plane;
                let g = dz[c] / plane as f32;
                dx.data[off..off + plane].iter_mut().for_each(|v| *v += g);
            }
        }
        dx
    }
}

impl Visit for SqueezeExcite {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "w1"), &mut self.w1);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "w2"), &mut self.w2);
        f(join(prefix, "b2"), &mut self.b2);
    }
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    /// `[fout, fin]`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        Self {
            fin,
            fout,
            weight: Param::new(uniform_init(fin, fout * fin, rng)),
            bias: Param::new(uniform_init(fin, fout, rng)),
        }
    }

    /// `x` is `[n, fin]` row-major.
    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        let mut y = vec![0.0; n * self.fout];
        gemm(n, self.fin, self.fout, 1.0, x, false, &self.weight.value, true, 0.0, &mut y);
        for row in y.chunks_mut(self.fout) {
            row.iter_mut().zip(&self.bias.value).for_each(|(v, b)| *v += b);
        }
        y
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32], n: usize) -> Vec<f32> {
        gemm(self.fout, n, self.fin, 1.0, dy, true, x, false, 1.0, &mut self.weight.grad);
        for row in dy.chunks(self.fout) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let mut dx = vec![0.0; n * self.fin];
        gemm(n, self.fout, self.fin, 1.0, dy, false, &self.weight.value, false, 0.0, &mut dx);
        dx
    }
}

impl Visit for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Mean over each channel plane: `[n, c, h, w]` -> `[n, c]`.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let plane = x.plane();
    x.data
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f32], n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(n, c, h, w);
    let plane = h * w;
    for (p, chunk) in dx.data.chunks_mut(plane).enumerate() {
        let g = dy[p] / plane as f32;
        chunk.iter_mut().for_each(|v| *v = g);
    }
    dx
}
