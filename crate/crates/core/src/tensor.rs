//! Dense NCHW tensors and the forward/backward kernels of the segmentation
//! networks. All arithmetic is `f64`.
//!
//! Kernels work sample-by-sample and hand per-sample partial results back in
//! sample order; parameter gradients are summed sequentially so the result is
//! identical with and without the thread pool.

use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn from_samples(c: usize, h: usize, w: usize, samples: Vec<Vec<f64>>) -> Self {
        let n = samples.len();
        let mut data = Vec::with_capacity(n * c * h * w);
        for s in samples {
            data.extend_from_slice(&s);
        }
        Self { n, c, h, w, data }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands, where
/// `op(a)` is `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds row-major (or transposed) matrices
    // of the asserted sizes; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
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

/// Column matrix `[c·k·k, h·w]` for a `k × k` same-padded convolution.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let dst = &mut col[row + y * w + x0..row + y * w + x1];
                    let s0 = (x0 as isize + dx) as usize;
                    dst.copy_from_slice(&src[sy * w + s0..sy * w + s0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        let dst = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        let sx = (xx as isize + dx) as usize;
                        dst[sy * w + sx] += col[row + y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// Same-padded `k × k` convolution, `weight` shaped `[out, in, k, k]`.
pub fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], out_c: usize, k: usize) -> Tensor {
    let hw = x.plane();
    let kk = x.c * k * k;
    let outs = par::map_range(x.n, |i| {
        let mut out = vec![0.0; out_c * hw];
        for (o, &b) in bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(b);
        }
        if k == 1 {
            gemm(out_c, kk, hw, weight, false, x.sample(i), false, 1.0, &mut out);
        } else {
            let col = im2col(x.sample(i), x.c, x.h, x.w, k);
            gemm(out_c, kk, hw, weight, false, &col, false, 1.0, &mut out);
        }
        out
    });
    Tensor::from_samples(out_c, x.h, x.w, outs)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    dy: &Tensor,
    k: usize,
    need_dx: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let out_c = dy.c;
    let hw = x.plane();
    let kk = x.c * k * k;
    let parts = par::map_range(x.n, |i| {
        let g = dy.sample(i);
        let col;
        let cols: &[f64] = if k == 1 {
            x.sample(i)
        } else {
            col = im2col(x.sample(i), x.c, x.h, x.w, k);
            &col
        };
        let mut dw = vec![0.0; out_c * kk];
        gemm(out_c, hw, kk, g, false, cols, true, 0.0, &mut dw);
        let db: Vec<f64> = (0..out_c).map(|o| g[o * hw..(o + 1) * hw].iter().sum()).collect();
        let dx = need_dx.then(|| {
            let mut dcol = vec![0.0; kk * hw];
            gemm(kk, out_c, hw, weight, true, g, false, 0.0, &mut dcol);
            if k == 1 {
                dcol
            } else {
                col2im(&dcol, x.c, x.h, x.w, k)
            }
        });
        (dx, dw, db)
    });
    let mut dw = vec![0.0; out_c * kk];
    let mut db = vec![0.0; out_c];
    let mut dxs = Vec::with_capacity(x.n);
    for (dx, pw, pb) in parts {
        for (a, b) in dw.iter_mut().zip(&pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(&pb) {
            *a += b;
        }
        if let Some(dx) = dx {
            dxs.push(dx);
        }
    }
    let dx = need_dx.then(|| Tensor::from_samples(x.c, x.h, x.w, dxs));
    (dx, dw, db)
}

/// 2×2 stride-2 transposed convolution, `weight` shaped `[in, out, 2, 2]`.
pub fn conv_transpose_forward(x: &Tensor, weight: &[f64], bias: &[f64], out_c: usize) -> Tensor {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let outs = par::map_range(x.n, |i| {
        let mut g = vec![0.0; out_c * 4 * hw];
        gemm(out_c * 4, x.c, hw, weight, true, x.sample(i), false, 0.0, &mut g);
        let mut out = vec![0.0; out_c * oh * ow];
        for o in 0..out_c {
            for a in 0..2 {
                for b in 0..2 {
                    let src = &g[(o * 4 + a * 2 + b) * hw..(o * 4 + a * 2 + b + 1) * hw];
                    for y in 0..h {
                        let row = o * oh * ow + (2 * y + a) * ow + b;
                        for xx in 0..w {
                            out[row + 2 * xx] = src[y * w + xx] + bias[o];
                        }
                    }
                }
            }
        }
        out
    });
    Tensor::from_samples(out_c, oh, ow, outs)
}

pub fn conv_transpose_backward(x: &Tensor, weight: &[f64], dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let out_c = dy.c;
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let ow = 2 * w;
    let parts = par::map_range(x.n, |i| {
        let d = dy.sample(i);
        let mut g = vec![0.0; out_c * 4 * hw];
        let mut db = vec![0.0; out_c];
        for o in 0..out_c {
            for a in 0..2 {
                for b in 0..2 {
                    let dst = &mut g[(o * 4 + a * 2 + b) * hw..(o * 4 + a * 2 + b + 1) * hw];
                    for y in 0..h {
                        let row = o * 4 * hw + (2 * y + a) * ow + b;
                        for xx in 0..w {
                            dst[y * w + xx] = d[row + 2 * xx];
                        }
                    }
                }
            }
            db[o] = d[o * 4 * hw..(o + 1) * 4 * hw].iter().sum();
        }
        let mut dw = vec![0.0; x.c * out_c * 4];
        gemm(x.c, hw, out_c * 4, x.sample(i), false, &g, true, 0.0, &mut dw);
        let mut dx = vec![0.0; x.c * hw];
        gemm(x.c, out_c * 4, hw, weight, false, &g, false, 0.0, &mut dx);
        (dx, dw, db)
    });
    let mut dw = vec![0.0; x.c * out_c * 4];
    let mut db = vec![0.0; out_c];
    let mut dxs = Vec::with_capacity(x.n);
    for (dx, pw, pb) in parts {
        for (a, b) in dw.iter_mut().zip(&pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(&pb) {
            *a += b;
        }
        dxs.push(dx);
    }
    (Tensor::from_samples(x.c, h, w, dxs), dw, db)
}

pub const BN_EPS: f64 = 1e-5;

/// Normalized activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean (train mode only).
    pub mean: Vec<f64>,
    /// Per-channel unbiased batch variance (train mode only).
    pub var_unbiased: Vec<f64>,
    pub train: bool,
}

/// Batch normalization. In train mode statistics come from the batch; in
/// eval mode from `running`.
pub fn batch_norm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> (Tensor, BnCache) {
    let (c, hw) = (x.c, x.plane());
    let m = (x.n * hw) as f64;
    let train = running.is_none();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    match running {
        None => {
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..x.n {
                    s += x.sample(i)[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut v = 0.0;
                for i in 0..x.n {
                    v += x.sample(i)[ch * hw..(ch + 1) * hw].iter().map(|&t| (t - mu) * (t - mu)).sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = v / m;
            }
        }
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    let sl = x.sample_len();
    for i in 0..x.n {
        for ch in 0..c {
            let r = i * sl + ch * hw..i * sl + (ch + 1) * hw;
            for (xh, yy) in xhat.data[r.clone()].iter_mut().zip(&mut y.data[r]) {
                *xh = (*xh - mean[ch]) * inv_std[ch];
                *yy = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    let var_unbiased = if train && m > 1.0 { var.iter().map(|v| v * m / (m - 1.0)).collect() } else { var.clone() };
    (y, BnCache { xhat, inv_std, mean, var_unbiased, train })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward(dy: &Tensor, gamma: &[f64], cache: &BnCache) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (c, hw) = (dy.c, dy.plane());
    let sl = dy.sample_len();
    let m = (dy.n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..dy.n {
        for ch in 0..c {
            let r = i * sl + ch * hw..i * sl + (ch + 1) * hw;
            for (g, xh) in dy.data[r.clone()].iter().zip(&cache.xhat.data[r]) {
                dbeta[ch] += g;
                dgamma[ch] += g * xh;
            }
        }
    }
    let mut dx = dy.clone();
    for i in 0..dy.n {
        for ch in 0..c {
            let r = i * sl + ch * hw..i * sl + (ch + 1) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            for (d, xh) in dx.data[r.clone()].iter_mut().zip(&cache.xhat.data[r]) {
                *d = if cache.train { scale * (*d - dbeta[ch] / m - xh * dgamma[ch] / m) } else { scale * *d };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// 2×2 stride-2 max pooling; returns the output and the flat argmax index of
/// every output element within its input sample.
pub fn max_pool_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0usize; y.data.len()];
    let (sl, osl) = (x.sample_len(), y.sample_len());
    for i in 0..x.n {
        for ch in 0..x.c {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ch * x.plane() + (2 * yy + dy) * x.w + 2 * xx + dx;
                        let v = x.data[i * sl + idx];
                        if v > best {
                            best = v;
                            bi = idx;
                        }
                    }
                    let o = i * osl + ch * oh * ow + yy * ow + xx;
                    y.data[o] = best;
                    arg[o] = bi;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(x: &Tensor, arg: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    let (sl, osl) = (x.sample_len(), dy.sample_len());
    for i in 0..dy.n {
        for o in 0..osl {
            dx.data[i * sl + arg[i * osl + o]] += dy.data[i * osl + o];
        }
    }
    dx
}

pub fn concat_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let osl = out.sample_len();
    for i in 0..a.n {
        let dst = &mut out.data[i * osl..(i + 1) * osl];
        dst[..a.sample_len()].copy_from_slice(a.sample(i));
        dst[a.sample_len()..].copy_from_slice(b.sample(i));
    }
    out
}

pub fn concat_backward(a_c: usize, dy: &Tensor) -> (Tensor, Tensor) {
    let b_c = dy.c - a_c;
    let mut da = Tensor::zeros(dy.n, a_c, dy.h, dy.w);
    let mut db = Tensor::zeros(dy.n, b_c, dy.h, dy.w);
    let (asl, bsl) = (da.sample_len(), db.sample_len());
    for i in 0..dy.n {
        let src = dy.sample(i);
        da.data[i * asl..(i + 1) * asl].copy_from_slice(&src[..asl]);
        db.data[i * bsl..(i + 1) * bsl].copy_from_slice(&src[asl..]);
    }
    (da, db)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    y
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&y.data) {
        *d *= o * (1.0 - o);
    }
    dx
}
