//! Forward and backward kernels for the layers the denoiser is made of.
//!
//! All kernels work on NCHW tensors. Backward kernels accumulate parameter
//! gradients into caller-owned buffers and return the input gradient.

use crate::tensor::{gemm, Mat, Scalar, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn transposed(&self) -> ConvGeom {
        ConvGeom { in_ch: self.out_ch, out_ch: self.in_ch, ..*self }
    }
}

/// `[co, ci, ky, kx]` -> `[ci, co, k-1-ky, k-1-kx]`.
fn flip_transpose<T: Scalar>(weight: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.kernel;
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..g.out_ch {
        for ci in 0..g.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    out[((ci * g.out_ch + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        weight[((co * g.in_ch + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

/// Valid output columns `[lo, hi)` for kernel offset `k` along an axis of
/// length `len` (stride 1), and the matching input start.
fn valid_span(k: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out);
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = g.out_hw(h, w);
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, w, ow);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        line[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], h: usize, w: usize, g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_hw(h, w);
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let from = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, w, ow);
                        for (d, &v) in line[lo + kx - g.pad..hi + kx - g.pad].iter_mut().zip(&from[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, &v) in from.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert_eq!(c, g.in_ch, "conv input channels");
    let (oh, ow) = g.out_hw(h, w);
    let hw = oh * ow;
    let mut y = Tensor::zeros([n, g.out_ch, oh, ow]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * hw] };
    let wmat = Mat::rm(weight, g.out_ch, g.col_rows());
    for i in 0..n {
        let cols: &[T] = if g.is_pointwise() {
            x.item(i)
        } else {
            im2col(x.item(i), h, w, g, &mut col);
            &col
        };
        let out = y.item_mut(i);
        gemm(T::one(), wmat, Mat::rm(cols, g.col_rows(), hw), T::zero(), out);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut out[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Accumulates `dweight`/`dbias` and returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    g: &ConvGeom,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) -> Tensor<T> {
    let [n, _, h, w] = x.shape();
    let [_, _, oh, ow] = dy.shape();
    let hw = oh * ow;
    let rows = g.col_rows();
    let mut col = vec![T::zero(); rows * hw];
    for i in 0..n {
        let dyi = Mat::rm(dy.item(i), g.out_ch, hw);
        let cols: &[T] = if g.is_pointwise() {
            x.item(i)
        } else {
            im2col(x.item(i), h, w, g, &mut col);
            &col
        };
        gemm(T::one(), dyi, Mat::rm(cols, rows, hw).t(), T::one(), dweight);
    }
    let dx = if g.stride == 1 && g.kernel % 2 == 1 && g.pad == g.kernel / 2 {
        // "same" convolution: the input gradient is itself a same convolution
        // of dy with spatially flipped, channel-transposed weights
        conv2d_forward(dy, &flip_transpose(weight, g), None, &g.transposed())
    } else {
        let mut dx = Tensor::zeros(x.shape());
        let mut dcol = vec![T::zero(); rows * hw];
        let wmat = Mat::rm(weight, g.out_ch, rows);
        for i in 0..n {
            gemm(T::one(), wmat.t(), Mat::rm(dy.item(i), g.out_ch, hw), T::zero(), &mut dcol);
            col2im(&dcol, h, w, g, dx.item_mut(i));
        }
        dx
    };
    if let Some(db) = dbias {
        for i in 0..n {
            let d = dy.item(i);
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += d[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
            }
        }
    }
    dx
}

/// Per-(item, group) mean and reciprocal standard deviation.
pub type GroupStats<T> = Vec<(T, T)>;

pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    groups: usize,
) -> (Tensor<T>, GroupStats<T>) {
    let [n, c, h, w] = x.shape();
    let cpg = c / groups;
    let span = cpg * h * w;
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut stats = Vec::with_capacity(n * groups);
    let count = T::of(span as f64);
    for i in 0..n {
        let xi = x.item(i);
        let yi = y.item_mut(i);
        for gi in 0..groups {
            let seg = &xi[gi * span..(gi + 1) * span];
            let mean = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + T::of(GROUP_NORM_EPS)).sqrt();
            stats.push((mean, rstd));
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let (gm, bt) = (gamma[ch], beta[ch]);
                let off = ch * hw;
                for p in off..off + hw {
                    yi[p] = (xi[p] - mean) * rstd * gm + bt;
                }
            }
        }
    }
    (y, stats)
}

pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    stats: &GroupStats<T>,
    dy: &Tensor<T>,
    groups: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let cpg = c / groups;
    let hw = h * w;
    let count = T::of((cpg * hw) as f64);
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..n {
        let xi = x.item(i);
        let dyi = dy.item(i);
        let dxi = dx.item_mut(i);
        for gi in 0..groups {
            let (mean, rstd) = stats[i * groups + gi];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let off = ch * hw;
                let mut dg = T::zero();
                let mut db = T::zero();
                for p in off..off + hw {
                    let xhat = (xi[p] - mean) * rstd;
                    dg += dyi[p] * xhat;
                    db += dyi[p];
                    let dxhat = dyi[p] * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                dgamma[ch] += dg;
                dbeta[ch] += db;
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let off = ch * hw;
                for p in off..off + hw {
                    let xhat = (xi[p] - mean) * rstd;
                    let dxhat = dyi[p] * gamma[ch];
                    dxi[p] = rstd * (dxhat - m1 - xhat * m2);
                }
            }
        }
    }
    dx
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(v);
        *d *= s * (T::one() + v * (T::one() - s));
    }
    dx
}

/// `x: [n, din]`, `weight: [dout, din]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], dout: usize) -> Tensor<T> {
    let n = x.batch();
    let din = x.item_len();
    let mut y = Tensor::zeros([n, dout, 1, 1]);
    for i in 0..n {
        y.item_mut(i).copy_from_slice(bias);
    }
    gemm(T::one(), Mat::rm(x.data(), n, din), Mat::rm(weight, dout, din).t(), T::one(), y.data_mut());
    y
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor<T> {
    let n = x.batch();
    let din = x.item_len();
    let dout = dy.item_len();
    gemm(T::one(), Mat::rm(dy.data(), n, dout).t(), Mat::rm(x.data(), n, din), T::one(), dweight);
    for i in 0..n {
        for (acc, &d) in dbias.iter_mut().zip(dy.item(i)) {
            *acc += d;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    gemm(T::one(), Mat::rm(dy.data(), n, dout), Mat::rm(weight, dout, din), T::zero(), dx.data_mut());
    dx
}

/// Adds `bias[n, c]` to every spatial position of channel `c` of item `n`.
pub fn channel_bias_forward<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut y = x.clone();
    for i in 0..n {
        let b = bias.item(i);
        let yi = y.item_mut(i);
        for ch in 0..c {
            for v in &mut yi[ch * hw..(ch + 1) * hw] {
                *v += b[ch];
            }
        }
    }
    y
}

pub fn channel_bias_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let mut db = Tensor::zeros([n, c, 1, 1]);
    for i in 0..n {
        let d = dy.item(i);
        let out = db.item_mut(i);
        for ch in 0..c {
            out[ch] = d[ch * hw..(ch + 1) * hw].iter().copied().sum();
        }
    }
    db
}

pub fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    let cb = b.shape()[1];
    let mut y = Tensor::zeros([n, ca + cb, h, w]);
    let la = a.item_len();
    for i in 0..n {
        let yi = y.item_mut(i);
        yi[..la].copy_from_slice(a.item(i));
        yi[la..].copy_from_slice(b.item(i));
    }
    y
}

pub fn concat_backward<T: Scalar>(dy: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = dy.shape();
    let mut da = Tensor::zeros([n, ca, h, w]);
    let mut db = Tensor::zeros([n, c - ca, h, w]);
    let la = da.item_len();
    for i in 0..n {
        let d = dy.item(i);
        da.item_mut(i).copy_from_slice(&d[..la]);
        db.item_mut(i).copy_from_slice(&d[la..]);
    }
    (da, db)
}

pub fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let (xd, yd) = (x.data(), y.data_mut());
    for p in 0..n * c {
        for iy in 0..2 * h {
            for ix in 0..2 * w {
                yd[(p * 2 * h + iy) * 2 * w + ix] = xd[(p * h + iy / 2) * w + ix / 2];
            }
        }
    }
    y
}

pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let (dyd, dxd) = (dy.data(), dx.data_mut());
    for p in 0..n * c {
        for iy in 0..h2 {
            for ix in 0..w2 {
                dxd[(p * h + iy / 2) * w + ix / 2] += dyd[(p * h2 + iy) * w2 + ix];
            }
        }
    }
    dx
}

/// Single-head self-attention over spatial positions. Returns the output and
/// the row-stochastic attention matrices (`n * hw * hw`).
pub fn attention_forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let [n, c, h, w] = q.shape();
    let hw = h * w;
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![T::zero(); n * hw * hw];
    for i in 0..n {
        let a = &mut probs[i * hw * hw..(i + 1) * hw * hw];
        gemm(scale, Mat::rm(q.item(i), c, hw).t(), Mat::rm(k.item(i), c, hw), T::zero(), a);
        for row in a.chunks_mut(hw) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        let a = &probs[i * hw * hw..(i + 1) * hw * hw];
        gemm(T::one(), Mat::rm(v.item(i), c, hw), Mat::rm(a, hw, hw).t(), T::zero(), out.item_mut(i));
    }
    (out, probs)
}

pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = q.shape();
    let hw = h * w;
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    let mut ds = vec![T::zero(); hw * hw];
    for i in 0..n {
        let a = &probs[i * hw * hw..(i + 1) * hw * hw];
        let doi = Mat::rm(dout.item(i), c, hw);
        gemm(T::one(), doi, Mat::rm(a, hw, hw), T::zero(), dv.item_mut(i));
        // dA = dO^T V
        gemm(T::one(), doi.t(), Mat::rm(v.item(i), c, hw), T::zero(), &mut ds);
        for (row_d, row_a) in ds.chunks_mut(hw).zip(a.chunks(hw)) {
            let dot: T = row_d.iter().zip(row_a).map(|(&d, &p)| d * p).sum();
            for (d, &p) in row_d.iter_mut().zip(row_a) {
                *d = p * (*d - dot) * scale;
            }
        }
        gemm(T::one(), Mat::rm(k.item(i), c, hw), Mat::rm(&ds, hw, hw).t(), T::zero(), dq.item_mut(i));
        gemm(T::one(), Mat::rm(q.item(i), c, hw), Mat::rm(&ds, hw, hw), T::zero(), dk.item_mut(i));
    }
    (dq, dk, dv)
}

pub fn embed_forward<T: Scalar>(table: &[T], dim: usize, labels: &[usize]) -> Tensor<T> {
    let mut y = Tensor::zeros([labels.len(), dim, 1, 1]);
    for (i, &l) in labels.iter().enumerate() {
        y.item_mut(i).copy_from_slice(&table[l * dim..(l + 1) * dim]);
    }
    y
}

pub fn embed_backward<T: Scalar>(dy: &Tensor<T>, dim: usize, labels: &[usize], dtable: &mut [T]) {
    for (i, &l) in labels.iter().enumerate() {
        for (acc, &d) in dtable[l * dim..(l + 1) * dim].iter_mut().zip(dy.item(i)) {
            *acc += d;
        }
    }
}

/// Sinusoidal embedding of integer timesteps: `sin` in the first half,
/// `cos` in the second, geometric frequencies from 1 down to 1/10000.
pub fn timestep_embedding<T: Scalar>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut y = Tensor::zeros([timesteps.len(), dim, 1, 1]);
    for (i, &t) in timesteps.iter().enumerate() {
        let row = y.item_mut(i);
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[j] = T::of(arg.sin());
            row[half + j] = T::of(arg.cos());
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, wt: &[f64], b: &[f64], g: &ConvGeom) -> Tensor<f64> {
        let [n, _, h, w] = x.shape();
        let (oh, ow) = g.out_hw(h, w);
        let mut y = Tensor::zeros([n, g.out_ch, oh, ow]);
        for i in 0..n {
            for co in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[co];
                        for ci in 0..g.in_ch {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += wt[((co * g.in_ch + ci) * g.kernel + ky) * g.kernel + kx]
                                            * x.item(i)[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        y.item_mut(i)[(co * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    fn ramp(len: usize, k: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 * k).sin() * 1.3).fract()).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for g in [
            ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, pad: 1 },
            ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 },
            ConvGeom { in_ch: 2, out_ch: 3, kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = Tensor::from_vec([2, 2, 6, 6], ramp(144, 0.7)).unwrap();
            let wt = ramp(g.out_ch * g.in_ch * g.kernel * g.kernel, 1.9);
            let b = vec![0.1, -0.2, 0.3];
            let y = conv2d_forward(&x, &wt, Some(&b), &g);
            let want = naive_conv(&x, &wt, &b, &g);
            assert!(y.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_input_gradient_matches_adjoint() {
        // <conv(x), dy> is linear in x, so its gradient is the adjoint applied to dy
        for g in [
            ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, pad: 1 },
            ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 },
            ConvGeom { in_ch: 3, out_ch: 2, kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = Tensor::from_vec([2, g.in_ch, 5, 5], ramp(2 * g.in_ch * 25, 0.3)).unwrap();
            let wt = ramp(g.out_ch * g.in_ch * g.kernel * g.kernel, 1.1);
            let y = conv2d_forward(&x, &wt, None, &g);
            let dy = Tensor::from_vec(y.shape(), ramp(y.len(), 2.3)).unwrap();
            let mut dw = vec![0.0; wt.len()];
            let dx = conv2d_backward(&x, &wt, &dy, &g, &mut dw, None);
            for i in 0..x.len() {
                let mut e = Tensor::zeros(x.shape());
                e.data_mut()[i] = 1.0;
                let ye = conv2d_forward(&e, &wt, None, &g);
                let want: f64 = ye.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
                assert!((dx.data()[i] - want).abs() < 1e-12);
            }
            for j in 0..wt.len() {
                let mut we = vec![0.0; wt.len()];
                we[j] = 1.0;
                let ye = conv2d_forward(&x, &we, None, &g);
                let want: f64 = ye.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
                assert!((dw[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let q = Tensor::from_vec([1, 2, 2, 2], ramp(8, 0.3)).unwrap();
        let (_, probs) = attention_forward(&q, &q, &q);
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_embedding_endpoints() {
        let e = timestep_embedding::<f64>(&[0, 3], 8);
        assert_eq!(&e.item(0)[..4], &[0.0; 4]);
        assert_eq!(&e.item(0)[4..], &[1.0; 4]);
        assert!((e.item(1)[0] - 3f64.sin()).abs() < 1e-15);
    }
}
