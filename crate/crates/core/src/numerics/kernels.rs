//! Slice-level forward and backward kernels.
//!
//! Reduction order is fixed everywhere: a dot product over `k` is accumulated
//! sequentially from `p = 0` upward starting at zero, with separate multiply
//! and add (no fused multiply-add). The matmul kernel walks four `k` steps per
//! pass over an output row but applies them to each element in ascending
//! order, so every output equals the naive triple loop bit for bit.

use super::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    if n == 0 {
        return c;
    }
    for (a_row, c_row) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n)).take(m) {
        if k == 0 {
            break;
        }
        let mut p = 0;
        while p + 4 <= k {
            let (x0, x1, x2, x3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for ((((c, &y0), &y1), &y2), &y3) in c_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                let mut t = *c;
                t = t + x0 * y0;
                t = t + x1 * y1;
                t = t + x2 * y2;
                t = t + x3 * y3;
                *c = t;
            }
            p += 4;
        }
        while p < k {
            let x = a_row[p];
            for (c, &y) in c_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *c = *c + x * y;
            }
            p += 1;
        }
    }
    c
}

pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul(a, &transpose(b, n, k), m, k, n)
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `[k×n]`.
pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul(&transpose(a, m, k), b, k, m, n)
}

pub fn add_assign<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + v;
    }
}

// ---------------------------------------------------------------------------
// GELU

/// Which GELU formula to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeluKind {
    /// `0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))`
    #[default]
    Tanh,
    /// `0.5·x·(1 + erf(x/√2))`
    Erf,
}

const GELU_COEF: f64 = 0.044715;

#[inline]
fn sqrt_2_over_pi<T: Scalar>() -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt())
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T, kind: GeluKind) -> T {
    let half = T::of(0.5);
    match kind {
        GeluKind::Tanh => {
            let u = sqrt_2_over_pi::<T>() * (x + T::of(GELU_COEF) * x * x * x);
            half * x * (T::one() + u.tanh())
        }
        GeluKind::Erf => {
            let xf = x.as_f64();
            T::of(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
        }
    }
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T, kind: GeluKind) -> T {
    let half = T::of(0.5);
    match kind {
        GeluKind::Tanh => {
            let c = sqrt_2_over_pi::<T>();
            let a = T::of(GELU_COEF);
            let u = c * (x + a * x * x * x);
            let t = u.tanh();
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
        }
        GeluKind::Erf => {
            let xf = x.as_f64();
            let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
            T::of(cdf + xf * pdf)
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization. Rows are the trailing dimension of width `d`.

/// Returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dt = T::of(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dt;
        let var = row.iter().fold(T::zero(), |s, &v| {
            let c = v - mean;
            s + c * c
        }) / dt;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgain)`.
pub fn layer_norm_backward<T: Scalar>(dy: &[T], xhat: &[T], rstd: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = dy.len() / d;
    let dt = T::of(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgain = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgain[j] = dgain[j] + dyr[j] * xh[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat = mean_dxhat + dxhat[j];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xh[j];
        }
        mean_dxhat = mean_dxhat / dt;
        mean_dxhat_xhat = mean_dxhat_xhat / dt;
        for j in 0..d {
            dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain)
}

/// Returns `(y, rstd)`.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dt = T::of(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / dt;
        let rs = T::one() / (ms + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            y[r * d + j] = row[j] * rs * gain[j];
        }
    }
    (y, rstd)
}

pub fn rms_norm_backward<T: Scalar>(dy: &[T], x: &[T], rstd: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = dy.len() / d;
    let dt = T::of(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgain = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &x[r * d..(r + 1) * d];
        let rs = rstd[r];
        let mut dot = T::zero();
        for j in 0..d {
            dgain[j] = dgain[j] + dyr[j] * xr[j] * rs;
            dot = dot + dyr[j] * gain[j] * xr[j];
        }
        let coef = rs * rs * rs * dot / dt;
        for j in 0..d {
            dx[r * d + j] = rs * dyr[j] * gain[j] - coef * xr[j];
        }
    }
    (dx, dgain)
}

// ---------------------------------------------------------------------------
// Softmax and attention

/// In-place softmax of one row. Entries equal to `-inf` become exactly zero; a
/// row that is entirely `-inf` becomes all zeros.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Geometry of a batched multi-head attention call. Activations are
/// `[batch·seq, heads·head_dim]` with head `h` occupying columns
/// `h·head_dim .. (h+1)·head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttnShape {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

fn gather_head<T: Scalar>(x: &[T], s: &AttnShape, b: usize, h: usize) -> Vec<T> {
    let w = s.width();
    let mut out = Vec::with_capacity(s.seq * s.head_dim);
    for t in 0..s.seq {
        let base = (b * s.seq + t) * w + h * s.head_dim;
        out.extend_from_slice(&x[base..base + s.head_dim]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], src: &[T], s: &AttnShape, b: usize, h: usize) {
    let w = s.width();
    for t in 0..s.seq {
        let base = (b * s.seq + t) * w + h * s.head_dim;
        dst[base..base + s.head_dim].copy_from_slice(&src[t * s.head_dim..(t + 1) * s.head_dim]);
    }
}

/// Scaled logits `Q_h K_hᵀ / √d_k` for one sequence and head, `[seq×seq]`, unmasked.
pub fn head_logits<T: Scalar>(q: &[T], k: &[T], s: &AttnShape, b: usize, h: usize) -> Vec<T> {
    let qh = gather_head(q, s, b, h);
    let kh = gather_head(k, s, b, h);
    let scale = T::one() / T::of(s.head_dim as f64).sqrt();
    let mut logits = matmul_bt(&qh, &kh, s.seq, s.head_dim, s.seq);
    logits.iter_mut().for_each(|v| *v = *v * scale);
    logits
}

fn mask_and_softmax<T: Scalar>(logits: &mut [T], seq: usize, causal: bool) {
    for i in 0..seq {
        let row = &mut logits[i * seq..(i + 1) * seq];
        if causal {
            row[i + 1..].iter_mut().for_each(|v| *v = T::neg_infinity());
        }
        softmax_row(row);
    }
}

/// Returns `(out, probs)` where `probs` holds one `[seq×seq]` block per
/// `(batch, head)` pair in `b·heads + h` order.
pub fn attention<T: Scalar>(q: &[T], k: &[T], v: &[T], s: &AttnShape) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); q.len()];
    let mut probs = Vec::with_capacity(s.batch * s.heads * s.seq * s.seq);
    for b in 0..s.batch {
        for h in 0..s.heads {
            let mut p = head_logits(q, k, s, b, h);
            mask_and_softmax(&mut p, s.seq, s.causal);
            let vh = gather_head(v, s, b, h);
            let oh = matmul(&p, &vh, s.seq, s.seq, s.head_dim);
            scatter_head(&mut out, &oh, s, b, h);
            probs.extend_from_slice(&p);
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    s: &AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, dk) = (s.seq, s.head_dim);
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dkk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let idx = b * s.heads + h;
            let p = &probs[idx * n * n..(idx + 1) * n * n];
            let doh = gather_head(dout, s, b, h);
            let qh = gather_head(q, s, b, h);
            let kh = gather_head(k, s, b, h);
            let vh = gather_head(v, s, b, h);

            let dvh = matmul_at(p, &doh, n, n, dk);
            let mut ds = matmul_bt(&doh, &vh, n, dk, n);
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut ds[i * n..(i + 1) * n];
                let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |acc, (&a, &g)| acc + a * g);
                for (g, &a) in dr.iter_mut().zip(pr) {
                    *g = a * (*g - dot) * scale;
                }
            }
            let dqh = matmul(&ds, &kh, n, n, dk);
            let dkh = matmul_at(&ds, &qh, n, n, dk);
            scatter_head(&mut dq, &dqh, s, b, h);
            scatter_head(&mut dkk, &dkh, s, b, h);
            scatter_head(&mut dv, &dvh, s, b, h);
        }
    }
    (dq, dkk, dv)
}

// ---------------------------------------------------------------------------
// Cross-entropy

/// Per-row negative log-likelihood and the softmax probabilities.
pub fn cross_entropy_rows<T: Scalar>(logits: &[T], targets: &[usize], vocab: usize) -> (Vec<f64>, Vec<T>) {
    let mut probs = logits.to_vec();
    let mut nll = Vec::with_capacity(targets.len());
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
        let lse = max + sum.ln();
        nll.push((lse - row[t]).as_f64());
        softmax_row(&mut probs[r * vocab..(r + 1) * vocab]);
    }
    (nll, probs)
}
