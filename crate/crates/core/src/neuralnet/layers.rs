//! Layer kernels with explicit backward passes.
//!
//! Activations are channel-major (`[channel][batch][time]`), so a
//! convolution computed as `W · im2col(x)` lands directly in that layout and
//! per-channel batch-norm reductions run over contiguous memory.

use rand::Rng;

use crate::scalar::{MatRef, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Act<T> {
    pub channels: usize,
    pub batch: usize,
    pub len: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(channels: usize, batch: usize, len: usize) -> Self {
        Self {
            channels,
            batch,
            len,
            data: vec![T::zero(); channels * batch * len],
        }
    }

    /// Gathers sample-major inputs (`[batch][channel][time]`) into the
    /// channel-major layout.
    pub fn from_samples(samples: &[&[T]], channels: usize, len: usize) -> Self {
        let batch = samples.len();
        let mut out = Self::zeros(channels, batch, len);
        for (b, s) in samples.iter().enumerate() {
            debug_assert_eq!(s.len(), channels * len);
            for c in 0..channels {
                let dst = (c * batch + b) * len;
                out.data[dst..dst + len].copy_from_slice(&s[c * len..(c + 1) * len]);
            }
        }
        out
    }

    /// Elements belonging to one channel, across the whole batch.
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.batch * self.len;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.batch * self.len;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// One-dimensional convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Padding `(kernel - 1) / 2`; keeps length at stride 1 for odd kernels.
    pub fn same(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel
    }

    /// Output positions `t` whose tap `kk` reads inside `[0, len)`.
    fn valid_range(&self, kk: usize, len: usize, lout: usize) -> (usize, usize) {
        let off = kk as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let room = len as isize - off;
        let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
        let hi = (hi as usize).min(lout);
        ((lo as usize).min(hi), hi)
    }
}

/// Output columns targeted per unfolded group; keeps the scratch matrix
/// cache-resident.
const GROUP_COLS: usize = 1024;

fn group_size(batch: usize, lout: usize) -> usize {
    (GROUP_COLS / lout.max(1)).clamp(1, batch.max(1))
}

/// Unfolds samples `b0..b0 + gs` into `col`, a `(cin * kernel) x (gs * lout)`
/// row-major matrix.
fn im2col_into<T: Scalar>(g: &ConvGeom, x: &Act<T>, b0: usize, gs: usize, col: &mut [T]) {
    let lout = g.out_len(x.len);
    let cols = gs * lout;
    for ci in 0..g.cin {
        for kk in 0..g.kernel {
            let row = &mut col[(ci * g.kernel + kk) * cols..][..cols];
            let (lo, hi) = g.valid_range(kk, x.len, lout);
            for bb in 0..gs {
                let src = &x.data[(ci * x.batch + b0 + bb) * x.len..][..x.len];
                let dst = &mut row[bb * lout..(bb + 1) * lout];
                dst[..lo].fill(T::zero());
                dst[hi..].fill(T::zero());
                if g.stride == 1 {
                    let start = lo + kk - g.pad;
                    dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                } else {
                    for t in lo..hi {
                        dst[t] = src[t * g.stride + kk - g.pad];
                    }
                }
            }
        }
    }
}

/// Scatters a group's column gradients back onto `dx`.
fn col2im_add<T: Scalar>(g: &ConvGeom, dcol: &[T], dx: &mut Act<T>, b0: usize, gs: usize) {
    let len = dx.len;
    let lout = g.out_len(len);
    let cols = gs * lout;
    for ci in 0..g.cin {
        for kk in 0..g.kernel {
            let row = &dcol[(ci * g.kernel + kk) * cols..][..cols];
            let (lo, hi) = g.valid_range(kk, len, lout);
            for bb in 0..gs {
                let dst = &mut dx.data[(ci * dx.batch + b0 + bb) * len..][..len];
                let src = &row[bb * lout..(bb + 1) * lout];
                if g.stride == 1 {
                    let start = lo + kk - g.pad;
                    dst[start..start + (hi - lo)]
                        .iter_mut()
                        .zip(&src[lo..hi])
                        .for_each(|(d, &s)| *d += s);
                } else {
                    for t in lo..hi {
                        dst[t * g.stride + kk - g.pad] += src[t];
                    }
                }
            }
        }
    }
}

/// Unfolds the whole batch into a `(cin * kernel) x (batch * lout)` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &Act<T>) -> Vec<T> {
    let mut col = vec![T::zero(); g.cin * g.kernel * x.batch * g.out_len(x.len)];
    im2col_into(g, x, 0, x.batch, &mut col);
    col
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(g: &ConvGeom, dcol: &[T], batch: usize, len: usize) -> Act<T> {
    let mut dx = Act::zeros(g.cin, batch, len);
    col2im_add(g, dcol, &mut dx, 0, batch);
    dx
}

fn strided<T>(data: &[T], row_stride: usize) -> MatRef<'_, T> {
    MatRef {
        data,
        row_stride: row_stride as isize,
        col_stride: 1,
    }
}

pub fn conv_forward<T: Scalar>(g: &ConvGeom, w: &[T], bias: Option<&[T]>, x: &Act<T>) -> Act<T> {
    assert_eq!(x.channels, g.cin, "conv input channels");
    assert_eq!(w.len(), g.weight_len(), "conv weight size");
    let lout = g.out_len(x.len);
    let ck = g.cin * g.kernel;
    let row = x.batch * lout;
    let gs = group_size(x.batch, lout);
    let mut col = vec![T::zero(); ck * gs * lout];
    let mut y = Act::zeros(g.cout, x.batch, lout);
    let mut b0 = 0;
    while b0 < x.batch {
        let n = gs.min(x.batch - b0);
        let cols = n * lout;
        im2col_into(g, x, b0, n, &mut col[..ck * cols]);
        T::gemm_strided(
            g.cout,
            ck,
            cols,
            T::one(),
            MatRef::row_major(w, ck),
            MatRef::row_major(&col[..ck * cols], cols),
            T::zero(),
            &mut y.data[b0 * lout..],
            row,
        );
        b0 += n;
    }
    if let Some(bias) = bias {
        for (co, &bv) in bias.iter().enumerate() {
            y.channel_mut(co).iter_mut().for_each(|v| *v += bv);
        }
    }
    y
}

/// Accumulates weight (and bias) gradients; returns the input gradient
/// when `need_dx` is set.
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    w: &[T],
    x: &Act<T>,
    dy: &Act<T>,
    dw: &mut [T],
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Act<T>> {
    let lout = dy.len;
    let ck = g.cin * g.kernel;
    let row = dy.batch * lout;
    let gs = group_size(x.batch, lout);
    let mut col = vec![T::zero(); ck * gs * lout];
    let mut dcol = if need_dx {
        vec![T::zero(); ck * gs * lout]
    } else {
        Vec::new()
    };
    let mut dx = need_dx.then(|| Act::zeros(g.cin, x.batch, x.len));
    let mut b0 = 0;
    while b0 < x.batch {
        let n = gs.min(x.batch - b0);
        let cols = n * lout;
        im2col_into(g, x, b0, n, &mut col[..ck * cols]);
        let dyg = strided(&dy.data[b0 * lout..], row);
        T::gemm(
            g.cout,
            cols,
            ck,
            T::one(),
            dyg,
            MatRef::transposed(&col[..ck * cols], cols),
            T::one(),
            dw,
        );
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                ck,
                g.cout,
                cols,
                T::one(),
                MatRef::transposed(w, ck),
                dyg,
                T::zero(),
                &mut dcol[..ck * cols],
            );
            col2im_add(g, &dcol[..ck * cols], dx, b0, n);
        }
        b0 += n;
    }
    if let Some(db) = db {
        for (co, d) in db.iter_mut().enumerate() {
            *d += dy.channel(co).iter().copied().sum::<T>();
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as folded into the running estimate.
    pub var: Vec<T>,
}

/// Normalizes `x` in place with batch statistics.
pub fn bn_train_forward<T: Scalar>(
    x: &mut Act<T>,
    scale: &[T],
    shift: &[T],
) -> (BnCache<T>, BnBatchStats<T>) {
    let n = x.batch * x.len;
    let nt = T::from_usize_lossy(n);
    let eps = T::lit(BN_EPS);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(x.channels);
    let mut stats = BnBatchStats {
        mean: Vec::with_capacity(x.channels),
        var: Vec::with_capacity(x.channels),
    };
    for c in 0..x.channels {
        let ch = x.channel_mut(c);
        let mean = ch.iter().copied().sum::<T>() / nt;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
        let is = T::one() / (var + eps).sqrt();
        let xh = &mut xhat[c * n..(c + 1) * n];
        for (v, h) in ch.iter_mut().zip(xh.iter_mut()) {
            *h = (*v - mean) * is;
            *v = scale[c] * *h + shift[c];
        }
        inv_std.push(is);
        stats.mean.push(mean);
        stats.var.push(if n > 1 {
            var * nt / (nt - T::one())
        } else {
            var
        });
    }
    (BnCache { xhat, inv_std }, stats)
}

/// Normalizes `x` in place with running statistics.
pub fn bn_eval_forward<T: Scalar>(x: &mut Act<T>, scale: &[T], shift: &[T], mean: &[T], var: &[T]) {
    let eps = T::lit(BN_EPS);
    for c in 0..x.channels {
        let a = scale[c] / (var[c] + eps).sqrt();
        let b = shift[c] - a * mean[c];
        x.channel_mut(c).iter_mut().for_each(|v| *v = a * *v + b);
    }
}

/// Turns `dy` into the input gradient in place and accumulates the
/// scale/shift gradients.
pub fn bn_backward<T: Scalar>(
    dy: &mut Act<T>,
    cache: &BnCache<T>,
    scale: &[T],
    dscale: &mut [T],
    dshift: &mut [T],
) {
    let n = dy.batch * dy.len;
    let nt = T::from_usize_lossy(n);
    for c in 0..dy.channels {
        let xh = &cache.xhat[c * n..(c + 1) * n];
        let g = dy.channel_mut(c);
        let sum_dy = g.iter().copied().sum::<T>();
        let sum_dy_xh = g.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>();
        dshift[c] += sum_dy;
        dscale[c] += sum_dy_xh;
        let k = scale[c] * cache.inv_std[c] / nt;
        for (d, &h) in g.iter_mut().zip(xh) {
            *d = k * (nt * *d - sum_dy - h * sum_dy_xh);
        }
    }
}

/// Folds batch statistics into running estimates.
pub fn bn_update_running<T: Scalar>(mean: &mut [T], var: &mut [T], stats: &BnBatchStats<T>) {
    let m = T::lit(BN_MOMENTUM);
    let one_m = T::one() - m;
    for c in 0..mean.len() {
        mean[c] = m * mean[c] + one_m * stats.mean[c];
        var[c] = m * var[c] + one_m * stats.var[c];
    }
}

pub fn relu_forward<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Masks `dy` by the sign of the ReLU output `y`.
pub fn relu_backward<T: Scalar>(dy: &mut [T], y: &[T]) {
    for (d, &o) in dy.iter_mut().zip(y) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar, R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub fn apply_mask<T: Scalar>(x: &mut [T], mask: &[T]) {
    x.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
}

/// Global average over time: returns a `channels x batch` row-major matrix.
pub fn gap_forward<T: Scalar>(x: &Act<T>) -> Vec<T> {
    let lt = T::from_usize_lossy(x.len);
    x.data
        .chunks_exact(x.len)
        .map(|r| r.iter().copied().sum::<T>() / lt)
        .collect()
}

pub fn gap_backward<T: Scalar>(dg: &[T], channels: usize, batch: usize, len: usize) -> Act<T> {
    let lt = T::from_usize_lossy(len);
    let mut dx = Act::zeros(channels, batch, len);
    for (row, &d) in dx.data.chunks_exact_mut(len).zip(dg) {
        row.fill(d / lt);
    }
    dx
}

/// `logits (classes x batch) = W (classes x features) · h (features x batch) + bias`.
pub fn dense_forward<T: Scalar>(
    w: &[T],
    bias: &[T],
    h: &[T],
    features: usize,
    batch: usize,
) -> Vec<T> {
    let classes = bias.len();
    let mut out = vec![T::zero(); classes * batch];
    for (k, row) in out.chunks_exact_mut(batch).enumerate() {
        row.fill(bias[k]);
    }
    T::gemm(
        classes,
        features,
        batch,
        T::one(),
        MatRef::row_major(w, features),
        MatRef::row_major(h, batch),
        T::one(),
        &mut out,
    );
    out
}

/// Accumulates dense gradients and returns the gradient w.r.t. `h`.
pub fn dense_backward<T: Scalar>(
    w: &[T],
    h: &[T],
    dlogits: &[T],
    features: usize,
    batch: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let classes = db.len();
    T::gemm(
        classes,
        batch,
        features,
        T::one(),
        MatRef::row_major(dlogits, batch),
        MatRef::transposed(h, batch),
        T::one(),
        dw,
    );
    for (k, d) in db.iter_mut().enumerate() {
        *d += dlogits[k * batch..(k + 1) * batch]
            .iter()
            .copied()
            .sum::<T>();
    }
    let mut dh = vec![T::zero(); features * batch];
    T::gemm(
        features,
        classes,
        batch,
        T::one(),
        MatRef::transposed(w, features),
        MatRef::row_major(dlogits, batch),
        T::zero(),
        &mut dh,
    );
    dh
}

/// Row-wise softmax of `classes x batch` logits; returns `batch x classes`.
pub fn softmax<T: Scalar>(logits: &[T], classes: usize, batch: usize) -> Vec<T> {
    let mut out = vec![T::zero(); classes * batch];
    for b in 0..batch {
        let mx = (0..classes)
            .map(|k| logits[k * batch + b])
            .fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for k in 0..classes {
            let e = (logits[k * batch + b] - mx).exp();
            out[b * classes + k] = e;
            z += e;
        }
        out[b * classes..(b + 1) * classes]
            .iter_mut()
            .for_each(|p| *p /= z);
    }
    out
}

/// Mean cross-entropy and its gradient w.r.t. `classes x batch` logits.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
) -> (T, Vec<T>, Vec<T>) {
    let batch = labels.len();
    let probs = softmax(logits, classes, batch);
    let bt = T::from_usize_lossy(batch);
    let mut loss = T::zero();
    let mut dlogits = vec![T::zero(); classes * batch];
    for (b, &y) in labels.iter().enumerate() {
        let mx = (0..classes)
            .map(|k| logits[k * batch + b])
            .fold(T::neg_infinity(), T::max);
        let lse = mx
            + (0..classes)
                .map(|k| (logits[k * batch + b] - mx).exp())
                .sum::<T>()
                .ln();
        loss += lse - logits[y * batch + b];
        for k in 0..classes {
            let ind = if k == y { T::one() } else { T::zero() };
            dlogits[k * batch + b] = (probs[b * classes + k] - ind) / bt;
        }
    }
    (loss / bt, dlogits, probs)
}
