//! Differentiable building blocks. Each layer caches what its backward pass
//! needs during a training forward pass; `backward` consumes that cache and
//! accumulates parameter gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::param::{Module, Param};
use crate::tensor::{expect_same, Tensor};
use crate::{Error, Result};

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, with either
/// operand optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe the slices above, whose lengths were checked.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// NCHW -> `[C][N * H * W]`.
fn to_channel_major(x: &Tensor) -> Vec<f32> {
    let [n, c, _, _] = x.shape();
    let p = x.plane();
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for ni in 0..n {
            out[ci * n * p + ni * p..ci * n * p + (ni + 1) * p].copy_from_slice(x.channel(ni, ci));
        }
    }
    out
}

/// `[C][N * H * W]` -> NCHW.
fn from_channel_major(data: &[f32], shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = shape;
    let p = h * w;
    let mut out = vec![0.0; data.len()];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * p..(ni * c + ci + 1) * p].copy_from_slice(&data[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]);
        }
    }
    Tensor::from_vec(shape, out).expect("shape preserved")
}

/// Zero-padded patches as a `[C * k * k][N * H * W]` matrix, written in
/// order so every element is stored exactly once.
fn im2col(x: &Tensor, k: usize) -> Vec<f32> {
    let [n, c, h, w] = x.shape();
    let pad = (k / 2) as isize;
    let mut cols = Vec::with_capacity(c * k * k * n * h * w);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = ((-dx).max(0) as usize).min(w);
                let x_hi = ((w as isize - dx).min(w as isize).max(0) as usize).max(x_lo);
                for ni in 0..n {
                    let src = x.channel(ni, ci);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            cols.resize(cols.len() + w, 0.0);
                            continue;
                        }
                        let s0 = (x_lo as isize + dx) as usize;
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        cols.resize(cols.len() + x_lo, 0.0);
                        cols.extend_from_slice(&srow[s0..s0 + (x_hi - x_lo)]);
                        cols.resize(cols.len() + (w - x_hi), 0.0);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`.
fn col2im(cols: &[f32], shape: [usize; 4], k: usize) -> Tensor {
    let [n, c, h, w] = shape;
    let pad = (k / 2) as isize;
    let cols_n = n * h * w;
    let mut out = Tensor::zeros(shape);
    let p = h * w;
    let data = out.data_mut();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for ni in 0..n {
                    let src = &cols[r * cols_n + ni * p..r * cols_n + (ni + 1) * p];
                    let dst = &mut data[(ni * c + ci) * p..(ni * c + ci + 1) * p];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let d0 = sy as usize * w + (x_lo as isize + dx) as usize;
                        let drow = &mut dst[d0..d0 + (x_hi - x_lo)];
                        for (d, s) in drow.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Same-padded stride-1 cross-correlation with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    /// Kaiming-normal weights (fan-in, ReLU gain), zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::Config(format!("kernel size must be 1 or 3, got {kernel}")));
        }
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
        let weights = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        let weight = Param::new(format!("{name}.weight"), vec![out_channels, in_channels, kernel, kernel], weights, true);
        let bias = bias.then(|| Param::new(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels], false));
        Ok(Self { weight, bias, in_channels, out_channels, kernel, cache: None })
    }

    pub fn zero_parameters(&mut self) {
        self.weight.value.iter_mut().for_each(|v| *v = 0.0);
        if let Some(b) = &mut self.bias {
            b.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.weight.name,
                self.in_channels,
                x.channels()
            )));
        }
        Ok(())
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let [n, _, h, w] = x.shape();
        let cols_n = n * h * w;
        // A single sample is already channel-major.
        let owned;
        let cols: &[f32] = if self.kernel != 1 {
            owned = im2col(x, self.kernel);
            &owned
        } else if n == 1 {
            x.data()
        } else {
            owned = to_channel_major(x);
            &owned
        };
        let k = self.in_channels * self.kernel * self.kernel;
        let mut out = vec![0.0; self.out_channels * cols_n];
        if let Some(b) = &self.bias {
            for (o, &bv) in b.value.iter().enumerate() {
                out[o * cols_n..(o + 1) * cols_n].iter_mut().for_each(|v| *v = bv);
            }
        }
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        gemm(self.out_channels, k, cols_n, &self.weight.value, false, cols, false, &mut out, beta);
        if n == 1 {
            return Tensor::from_vec([1, self.out_channels, h, w], out).expect("shape preserved");
        }
        from_channel_major(&out, [n, self.out_channels, h, w])
    }

    /// Inference form of a `k x k` convolution without the patch matrix: each
    /// sample is zero-padded once and every tap is a GEMM over a shifted view
    /// of the flattened padded planes. Rows come out `w + 2 * pad` wide; the
    /// extra columns are dropped.
    fn apply_shifted(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let (k, o) = (self.kernel, self.out_channels);
        let pad = k / 2;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let plane = ph * pw;
        let wide_n = h * pw;
        let mut out = Tensor::zeros([n, o, h, w]);
        // Tail slack keeps the last tap's view of the last channel in bounds.
        let mut padded = vec![0.0f32; c * plane + 2 * pad];
        let mut wide = vec![0.0f32; o * wide_n];
        for ni in 0..n {
            for ci in 0..c {
                let src = x.channel(ni, ci);
                for y in 0..h {
                    let at = ci * plane + (y + pad) * pw + pad;
                    padded[at..at + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
            match &self.bias {
                Some(b) => {
                    for (row, &bv) in wide.chunks_exact_mut(wide_n).zip(&b.value) {
                        row.fill(bv);
                    }
                }
                None => wide.fill(0.0),
            }
            for ky in 0..k {
                for kx in 0..k {
                    let offset = ky * pw + kx;
                    debug_assert!(offset + (c - 1) * plane + wide_n <= padded.len());
                    // SAFETY: A walks the `[O][C][k][k]` weights at tap
                    // (ky, kx); B reads `c` rows of `wide_n` from `offset`,
                    // in bounds by the slack above; C is `wide`.
                    unsafe {
                        matrixmultiply::sgemm(
                            o,
                            c,
                            wide_n,
                            1.0,
                            self.weight.value.as_ptr().add(ky * k + kx),
                            (c * k * k) as isize,
                            (k * k) as isize,
                            padded.as_ptr().add(offset),
                            plane as isize,
                            1,
                            1.0,
                            wide.as_mut_ptr(),
                            wide_n as isize,
                            1,
                        );
                    }
                }
            }
            for oi in 0..o {
                let dst = &mut out.data_mut()[(ni * o + oi) * h * w..(ni * o + oi + 1) * h * w];
                for (drow, srow) in dst.chunks_exact_mut(w).zip(wide[oi * wide_n..(oi + 1) * wide_n].chunks_exact(pw)) {
                    drow.copy_from_slice(&srow[..w]);
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let y = if train || self.kernel == 1 { self.apply(x) } else { self.apply_shifted(x) };
        self.cache = train.then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward before forward", self.weight.name)))?;
        let [n, _, h, w] = x.shape();
        if grad.shape() != [n, self.out_channels, h, w] {
            return Err(Error::Shape(format!("{}: gradient shape {:?}", self.weight.name, grad.shape())));
        }
        let cols_n = n * h * w;
        let k = self.in_channels * self.kernel * self.kernel;
        let g = to_channel_major(grad);
        let cols = if self.kernel == 1 { to_channel_major(&x) } else { im2col(&x, self.kernel) };
        gemm(self.out_channels, cols_n, k, &g, false, &cols, true, &mut self.weight.grad, 1.0);
        if let Some(b) = &mut self.bias {
            for (o, gb) in b.grad.iter_mut().enumerate() {
                *gb += g[o * cols_n..(o + 1) * cols_n].iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        let mut dcols = vec![0.0; k * cols_n];
        gemm(k, self.out_channels, cols_n, &self.weight.value, true, &g, false, &mut dcols, 0.0);
        Ok(if self.kernel == 1 {
            from_channel_major(&dcols, x.shape())
        } else {
            col2im(&dcols, x.shape(), self.kernel)
        })
    }
}

impl Module for Conv2d {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn visit_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

/// Per-channel batch normalization with learned affine transform.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub epsilon: f32,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels], false),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels], false),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], vec![1.0; channels]),
            momentum: 0.1,
            epsilon: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference with running statistics as a per-channel affine map in f32,
    /// optionally followed by ReLU.
    pub fn infer_in_place(&self, x: &mut Tensor, relu: bool) {
        let [n, c, _, _] = x.shape();
        let p = x.plane();
        for ci in 0..c {
            let istd = 1.0 / (self.running_var.value[ci] as f64 + self.epsilon as f64).sqrt();
            let g = self.gamma.value[ci] as f64;
            let scale = (g * istd) as f32;
            let shift = (self.beta.value[ci] as f64 - self.running_mean.value[ci] as f64 * g * istd) as f32;
            for ni in 0..n {
                let start = (ni * c + ci) * p;
                let plane = &mut x.data_mut()[start..start + p];
                if relu {
                    plane.iter_mut().for_each(|v| *v = (*v * scale + shift).max(0.0));
                } else {
                    plane.iter_mut().for_each(|v| *v = *v * scale + shift);
                }
            }
        }
    }

    /// `record` keeps what backward needs; eval mode may record too so
    /// gradients can flow through a frozen normalization.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, record: bool) -> Result<Tensor> {
        let [n, c, _, _] = x.shape();
        if c != self.channels() {
            return Err(Error::Shape(format!("{}: expected {} channels, got {c}", self.gamma.name, self.channels())));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::Config(format!("{}: batch of {n} in train mode", self.gamma.name)));
        }
        let p = x.plane();
        if mode == Mode::Eval && !record {
            let mut out = x.clone();
            self.infer_in_place(&mut out, false);
            self.cache = None;
            return Ok(out);
        }
        let count = (n * p) as f64;
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0f32; c];
        for ci in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0f64;
                    for ni in 0..n {
                        sum += x.channel(ni, ci).iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0f64;
                    for ni in 0..n {
                        sq += x.channel(ni, ci).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                    }
                    let var = sq / count;
                    let m = self.momentum as f64;
                    let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                    self.running_mean.value[ci] = ((1.0 - m) * self.running_mean.value[ci] as f64 + m * mean) as f32;
                    self.running_var.value[ci] = ((1.0 - m) * self.running_var.value[ci] as f64 + m * unbiased) as f32;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean.value[ci] as f64, self.running_var.value[ci] as f64),
            };
            let istd = 1.0 / (var + self.epsilon as f64).sqrt();
            inv_std[ci] = istd as f32;
            let (g, b) = (self.gamma.value[ci], self.beta.value[ci]);
            for ni in 0..n {
                let start = (ni * c + ci) * p;
                let src = x.channel(ni, ci);
                let nrm = &mut normalized.data_mut()[start..start + p];
                for (d, &s) in nrm.iter_mut().zip(src) {
                    *d = ((s as f64 - mean) * istd) as f32;
                }
                let dst = &mut out.data_mut()[start..start + p];
                for (d, &v) in dst.iter_mut().zip(&normalized.data()[start..start + p]) {
                    *d = g * v + b;
                }
            }
        }
        self.cache = record.then_some(BnCache { normalized, inv_std, batch_stats: mode == Mode::Train });
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward before forward", self.gamma.name)))?;
        expect_same(grad, &cache.normalized, "batchnorm backward")?;
        let [n, c, _, _] = grad.shape();
        let p = grad.plane();
        let count = (n * p) as f64;
        let mut dx = Tensor::zeros(grad.shape());
        for ci in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
            for ni in 0..n {
                for (&g, &xh) in grad.channel(ni, ci).iter().zip(cache.normalized.channel(ni, ci)) {
                    sum_g += g as f64;
                    sum_gx += g as f64 * xh as f64;
                }
            }
            self.gamma.grad[ci] += sum_gx as f32;
            self.beta.grad[ci] += sum_g as f32;
            let scale = self.gamma.value[ci] as f64 * cache.inv_std[ci] as f64;
            for ni in 0..n {
                let start = (ni * c + ci) * p;
                let g = grad.channel(ni, ci);
                let xh = cache.normalized.channel(ni, ci);
                let dst = &mut dx.data_mut()[start..start + p];
                if cache.batch_stats {
                    let mg = sum_g / count;
                    let mgx = sum_gx / count;
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xh) {
                        *d = (scale * (gv as f64 - mg - xv as f64 * mgx)) as f32;
                    }
                } else {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = (scale * gv as f64) as f32;
                    }
                }
            }
        }
        Ok(dx)
    }
}

impl Module for BatchNorm2d {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn visit_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor, record: bool) -> Tensor {
        if record {
            self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        }
        x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| Error::State("relu: backward before forward".into()))?;
        if mask.len() != grad.len() {
            return Err(Error::Shape("relu: gradient size differs from input".into()));
        }
        grad.data_mut().iter_mut().zip(mask).for_each(|(g, m)| {
            if !m {
                *g = 0.0
            }
        });
        Ok(grad)
    }
}

/// Non-overlapping max pooling over `factor x factor` windows.
#[derive(Debug, Clone)]
pub struct MaxPool {
    pub factor: usize,
    cache: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool {
    pub fn new(factor: usize) -> Self {
        Self { factor, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, record: bool) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        let f = self.factor;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("maxpool x{f}: {h}x{w} not divisible")));
        }
        let (oh, ow) = (h / f, w / f);
        if !record {
            let mut out = Tensor::full([n, c, oh, ow], f32::NEG_INFINITY);
            for (src, dst) in x.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(oh * ow)) {
                for (rows, drow) in src.chunks_exact(f * w).zip(dst.chunks_exact_mut(ow)) {
                    for row in rows.chunks_exact(w) {
                        for (d, win) in drow.iter_mut().zip(row.chunks_exact(f)) {
                            *d = win.iter().fold(*d, |m, &v| if v > m { v } else { m });
                        }
                    }
                }
            }
            return Ok(out);
        }
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
            let arg = &mut argmax[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..f {
                        let row = (oy * f + dy) * w;
                        for dx in 0..f {
                            let i = row + ox * f + dx;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    arg[oy * ow + ox] = best_i as u32;
                }
            }
        }
        if record {
            self.cache = Some((argmax, x.shape()));
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (argmax, shape) = self.cache.take().ok_or_else(|| Error::State("maxpool: backward before forward".into()))?;
        if grad.len() != argmax.len() {
            return Err(Error::Shape("maxpool: gradient size mismatch".into()));
        }
        let [n, c, h, w] = shape;
        let op = grad.plane();
        let mut dx = Tensor::zeros(shape);
        for plane in 0..n * c {
            let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
            for (g, &a) in grad.data()[plane * op..(plane + 1) * op].iter().zip(&argmax[plane * op..(plane + 1) * op]) {
                dst[a as usize] += g;
            }
        }
        Ok(dx)
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *d = srow[ox / factor];
            }
        }
    }
    out
}

/// `z + upsample_nearest(r, factor)` without the intermediate tensor.
pub fn upsample_add(z: &Tensor, r: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = r.shape();
    if z.shape() != [n, c, h * factor, w * factor] {
        return Err(Error::Shape(format!("upsample-add x{factor}: {:?} vs {:?}", z.shape(), r.shape())));
    }
    let mut out = z.clone();
    let ow = w * factor;
    let mut wide = vec![0.0f32; ow];
    for (dst, src) in out.data_mut().chunks_exact_mut(ow * factor).zip(r.data().chunks_exact(w)) {
        for (win, &v) in wide.chunks_exact_mut(factor).zip(src) {
            win.fill(v);
        }
        for drow in dst.chunks_exact_mut(ow) {
            drow.iter_mut().zip(&wide).for_each(|(d, &v)| *d += v);
        }
    }
    Ok(out)
}

/// Adjoint of `upsample_nearest`: sums each replicated block.
pub fn upsample_nearest_backward(grad: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, oh, ow] = grad.shape();
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::Shape(format!("upsample x{factor}: gradient {oh}x{ow} not divisible")));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &grad.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let drow = &mut dst[(oy / factor) * w..(oy / factor + 1) * w];
            for (ox, &g) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                drow[ox / factor] += g;
            }
        }
    }
    Ok(dx)
}

/// Stacks `a` then `b` along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape(format!("concat: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * sa..(ni + 1) * sa]);
        data.extend_from_slice(&b.data()[ni * sb..(ni + 1) * sb]);
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

/// Splits a concatenated gradient back into its `a` and `b` parts.
pub fn split_channels(grad: &Tensor, channels_a: usize) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = grad.shape();
    if channels_a > c {
        return Err(Error::Shape(format!("split: {channels_a} of {c} channels")));
    }
    let cb = c - channels_a;
    let (sa, sb) = (channels_a * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * sa);
    let mut b = Vec::with_capacity(n * sb);
    for ni in 0..n {
        let s = grad.sample(ni);
        a.extend_from_slice(&s[..sa]);
        b.extend_from_slice(&s[sa..]);
    }
    Ok((Tensor::from_vec([n, channels_a, h, w], a)?, Tensor::from_vec([n, cb, h, w], b)?))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    Relu::default().forward(x.clone(), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn naive_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
        let [n, c, h, w] = x.shape();
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros([n, conv.out_channels, h, w]);
        for ni in 0..n {
            for o in 0..conv.out_channels {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o] as f64);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * c + ci) * k + ky) * k + kx] as f64;
                                    acc += wv * x.channel(ni, ci)[sy as usize * w + sx as usize] as f64;
                                }
                            }
                        }
                        out.data_mut()[((ni * conv.out_channels + o) * h + y) * w + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut conv = Conv2d::new("c", 1, 1, 1, false, &mut rng()).unwrap();
        conv.weight.value[0] = 1.0;
        let x = random_tensor([2, 1, 4, 5], &mut rng());
        assert_eq!(conv.forward(&x, false).unwrap(), x);
    }

    #[test]
    fn impulse_response_of_ones_kernel() {
        let mut conv = Conv2d::new("c", 1, 1, 3, false, &mut rng()).unwrap();
        conv.weight.value.iter_mut().for_each(|v| *v = 1.0);
        let mut x = Tensor::zeros([1, 1, 7, 7]);
        x.data_mut()[3 * 7 + 3] = 1.0;
        let y = conv.forward(&x, false).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                let want = if (2..=4).contains(&r) && (2..=4).contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(y.data()[r * 7 + c], want);
            }
        }
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut r = rng();
        for (k, bias) in [(3, false), (3, true), (1, true)] {
            let mut conv = Conv2d::new("c", 3, 4, k, bias, &mut r).unwrap();
            if let Some(b) = &mut conv.bias {
                b.value.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
            }
            let x = random_tensor([2, 3, 5, 5], &mut r);
            let got = conv.forward(&x, false).unwrap();
            let want = naive_conv(&x, &conv);
            let diff = got.data().iter().zip(want.data()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff < 1e-5, "k={k}: {diff}");
        }
    }

    #[test]
    fn conv_backward_zero_and_linear() {
        let mut r = rng();
        let mut conv = Conv2d::new("c", 2, 3, 3, true, &mut r).unwrap();
        let x = random_tensor([1, 2, 4, 4], &mut r);
        conv.forward(&x, true).unwrap();
        let dx = conv.backward(&Tensor::zeros([1, 3, 4, 4])).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
        assert!(conv.weight.grad.iter().all(|&g| g == 0.0));

        let g = random_tensor([1, 3, 4, 4], &mut r);
        conv.forward(&x, true).unwrap();
        let d1 = conv.backward(&g).unwrap();
        let w1 = conv.weight.grad.clone();
        conv.weight.zero_grad();
        let mut g2 = g.clone();
        g2.scale(2.5);
        conv.forward(&x, true).unwrap();
        let d2 = conv.backward(&g2).unwrap();
        for (a, b) in d1.data().iter().zip(d2.data()) {
            assert!((2.5 * a - b).abs() < 1e-5);
        }
        for (a, b) in w1.iter().zip(&conv.weight.grad) {
            assert!((2.5 * a - b).abs() < 1e-4);
        }
        assert!(matches!(conv.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn inference_fast_paths_match_recording_paths() {
        let mut r = rng();
        let x = random_tensor([2, 3, 8, 8], &mut r);
        for f in [2, 4] {
            let fast = MaxPool::new(f).forward(&x, false).unwrap();
            let slow = MaxPool::new(f).forward(&x, true).unwrap();
            assert_eq!(fast, slow);
            let small = random_tensor([2, 3, 8 / f, 8 / f], &mut r);
            let mut expect = upsample_nearest(&small, f);
            expect.add_assign(&x).unwrap();
            assert_eq!(upsample_add(&x, &small, f).unwrap(), expect);
        }
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.forward(&x, Mode::Train, false).unwrap();
        let fast = bn.forward(&x, Mode::Eval, false).unwrap();
        let slow = bn.forward(&x, Mode::Eval, true).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let conv = Conv2d::new("c", 3, 4, 1, true, &mut r).unwrap();
        let one = Tensor::from_vec([1, 3, 8, 8], x.sample(1).to_vec()).unwrap();
        let both = conv.apply(&x);
        assert_eq!(conv.apply(&one).data(), both.sample(1));
        for bias in [false, true] {
            let mut conv = Conv2d::new("c", 3, 5, 3, bias, &mut r).unwrap();
            if let Some(b) = &mut conv.bias {
                b.value = vec![0.5, -1.0, 0.0, 2.0, 0.25];
            }
            for shape in [[2, 3, 8, 8], [1, 3, 5, 7], [1, 3, 1, 1]] {
                let x = random_tensor(shape, &mut r);
                let (fast, slow) = (conv.apply_shifted(&x), naive_conv(&x, &conv));
                assert_eq!(fast.shape(), slow.shape());
                for (a, b) in fast.data().iter().zip(slow.data()) {
                    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut r = rng();
        let mut bn = BatchNorm2d::new("bn", 3);
        let x = random_tensor([4, 3, 5, 5], &mut r);
        let y = bn.forward(&x, Mode::Train, false).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.channel(n, c).iter().map(|&v| v as f64)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
        }
        let constant = Tensor::full([2, 3, 2, 2], 4.0);
        assert!(bn.forward(&constant, Mode::Train, false).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(bn.forward(&random_tensor([1, 3, 2, 2], &mut r), Mode::Train, false), Err(Error::Config(_))));
        assert!(bn.forward(&random_tensor([1, 3, 2, 2], &mut r), Mode::Eval, false).is_ok());
    }

    #[test]
    fn pool_then_upsample_constant_is_identity() {
        let x = Tensor::full([1, 2, 4, 4], 3.0);
        let mut pool = MaxPool::new(2);
        assert_eq!(upsample_nearest(&pool.forward(&x, false).unwrap(), 2), x);
        assert!(pool.forward(&Tensor::zeros([1, 1, 3, 4]), false).is_err());
    }

    #[test]
    fn relu_identity() {
        let x = random_tensor([1, 2, 3, 3], &mut rng());
        let mut neg = x.clone();
        neg.scale(-1.0);
        let sum = add(&relu(&x), &relu(&neg)).unwrap();
        for (s, v) in sum.data().iter().zip(x.data()) {
            assert_eq!(*s, v.abs());
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let mut r = rng();
        let a = random_tensor([2, 1, 3, 3], &mut r);
        let b = random_tensor([2, 2, 3, 3], &mut r);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), [2, 3, 3, 3]);
        assert_eq!(ab.channel(1, 0), a.channel(1, 0));
        assert_eq!(ab.channel(1, 2), b.channel(1, 1));
        assert_eq!(split_channels(&ab, 1).unwrap(), (a, b));
        assert!(concat_channels(&Tensor::zeros([1, 1, 2, 2]), &Tensor::zeros([1, 1, 4, 4])).is_err());
    }
}
