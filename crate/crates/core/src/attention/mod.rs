//! Multi-head attention with linear, identity and residual-bottleneck queries.
//!
//! The residual bottleneck query is
//!
//! ```text
//! Q(X) = s · (X + f(X)),   f(X) = LN(GELU(RMSNorm(X) · W1) · W2)
//! ```
//!
//! with `W1 ∈ R^{d×d/2}`, `W2 ∈ R^{d/2×d}`, gain-only norms and `s = 1/2` by
//! default. Keys and values stay linear. Heads take contiguous column blocks of
//! width `d / h` of `Q`, `K` and `V`.

pub mod reparam;
pub mod verify;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{ops, AttnShape, GeluKind, Scalar, Tape, Tensor, Var};

/// How queries are produced from the attention input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum QueryMode {
    /// `X · W_Q`
    #[default]
    Linear,
    /// `X`
    Identity,
    /// `(X + f(X)) / 2`
    ResidualGelu,
}

impl QueryMode {
    pub const ALL: [QueryMode; 3] = [QueryMode::Linear, QueryMode::Identity, QueryMode::ResidualGelu];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::Linear => "linear",
            QueryMode::Identity => "identity",
            QueryMode::ResidualGelu => "residual-gelu",
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "linear" | "baseline" => Ok(QueryMode::Linear),
            "identity" => Ok(QueryMode::Identity),
            "residual-gelu" | "residualgelu" | "nonlinear" => Ok(QueryMode::ResidualGelu),
            other => Err(Error::Config(format!("unknown query mode '{other}'"))),
        }
    }
}

/// Parameters of the residual bottleneck `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<P> {
    /// `[d × d/2]`
    pub w1: P,
    /// `[d/2 × d]`
    pub w2: P,
    pub rms_gain: P,
    pub ln_gain: P,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryWeights<P> {
    Linear { w_q: P },
    Identity,
    ResidualGelu(Bottleneck<P>),
}

/// One layer's attention parameters. `P` is the leaf type: a [`Tensor`] for
/// stored weights, a tape [`Var`] while recording.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<P> {
    pub query: QueryWeights<P>,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
}

impl<P> AttentionWeights<P> {
    pub fn mode(&self) -> QueryMode {
        match self.query {
            QueryWeights::Linear { .. } => QueryMode::Linear,
            QueryWeights::Identity => QueryMode::Identity,
            QueryWeights::ResidualGelu(_) => QueryMode::ResidualGelu,
        }
    }

    /// Visits every parameter as `(name, value)` in canonical order.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        match &self.query {
            QueryWeights::Linear { w_q } => f(format!("{prefix}w_q"), w_q),
            QueryWeights::Identity => {}
            QueryWeights::ResidualGelu(b) => {
                f(format!("{prefix}q_w1"), &b.w1);
                f(format!("{prefix}q_w2"), &b.w2);
                f(format!("{prefix}q_rms_gain"), &b.rms_gain);
                f(format!("{prefix}q_ln_gain"), &b.ln_gain);
            }
        }
        f(format!("{prefix}w_k"), &self.w_k);
        f(format!("{prefix}w_v"), &self.w_v);
        f(format!("{prefix}w_o"), &self.w_o);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        match &mut self.query {
            QueryWeights::Linear { w_q } => f(format!("{prefix}w_q"), w_q),
            QueryWeights::Identity => {}
            QueryWeights::ResidualGelu(b) => {
                f(format!("{prefix}q_w1"), &mut b.w1);
                f(format!("{prefix}q_w2"), &mut b.w2);
                f(format!("{prefix}q_rms_gain"), &mut b.rms_gain);
                f(format!("{prefix}q_ln_gain"), &mut b.ln_gain);
            }
        }
        f(format!("{prefix}w_k"), &mut self.w_k);
        f(format!("{prefix}w_v"), &mut self.w_v);
        f(format!("{prefix}w_o"), &mut self.w_o);
    }

    /// Structure-preserving map, visiting in the same order as [`visit`](Self::visit).
    pub fn try_map<Q, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(String, &P) -> Result<Q, E>,
    ) -> Result<AttentionWeights<Q>, E> {
        let query = match &self.query {
            QueryWeights::Linear { w_q } => QueryWeights::Linear {
                w_q: f(format!("{prefix}w_q"), w_q)?,
            },
            QueryWeights::Identity => QueryWeights::Identity,
            QueryWeights::ResidualGelu(b) => QueryWeights::ResidualGelu(Bottleneck {
                w1: f(format!("{prefix}q_w1"), &b.w1)?,
                w2: f(format!("{prefix}q_w2"), &b.w2)?,
                rms_gain: f(format!("{prefix}q_rms_gain"), &b.rms_gain)?,
                ln_gain: f(format!("{prefix}q_ln_gain"), &b.ln_gain)?,
            }),
        };
        Ok(AttentionWeights {
            query,
            w_k: f(format!("{prefix}w_k"), &self.w_k)?,
            w_v: f(format!("{prefix}w_v"), &self.w_v)?,
            w_o: f(format!("{prefix}w_o"), &self.w_o)?,
        })
    }
}

impl<T: Scalar> AttentionWeights<Tensor<T>> {
    /// Checks internal shape consistency and returns the model width `d`.
    pub fn width(&self, n_head: usize) -> Result<usize> {
        let d = self.w_k.shape().first().copied().unwrap_or(0);
        let sq = [d, d];
        for (name, t) in [("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if t.shape() != sq {
                return Err(Error::InvalidArgument(format!(
                    "{name} has shape {:?}, want {sq:?}",
                    t.shape()
                )));
            }
        }
        if n_head == 0 || d % n_head != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {d} not divisible by {n_head} heads"
            )));
        }
        match &self.query {
            QueryWeights::Linear { w_q } if w_q.shape() != sq => {
                return Err(Error::shape("w_q", w_q.shape(), &sq));
            }
            QueryWeights::ResidualGelu(b) => {
                if d % 2 != 0 {
                    return Err(Error::InvalidArgument(format!("bottleneck needs even width, got {d}")));
                }
                let r = d / 2;
                if b.w1.shape() != [d, r]
                    || b.w2.shape() != [r, d]
                    || b.rms_gain.shape() != [d]
                    || b.ln_gain.shape() != [d]
                {
                    return Err(Error::InvalidArgument(format!(
                        "bottleneck shapes w1 {:?} w2 {:?} gains {:?}/{:?} inconsistent with d = {d}",
                        b.w1.shape(),
                        b.w2.shape(),
                        b.rms_gain.shape(),
                        b.ln_gain.shape()
                    )));
                }
            }
            _ => {}
        }
        Ok(d)
    }
}

/// Hyperparameters shared by every attention layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub n_head: usize,
    pub norm_eps: f64,
    /// Multiplier on `X + f(X)`.
    pub query_scale: f64,
    pub gelu: GeluKind,
}

impl AttentionConfig {
    pub const DEFAULT_NORM_EPS: f64 = 1e-5;
    pub const DEFAULT_QUERY_SCALE: f64 = 0.5;

    pub fn new(n_head: usize) -> Self {
        Self {
            n_head,
            norm_eps: Self::DEFAULT_NORM_EPS,
            query_scale: Self::DEFAULT_QUERY_SCALE,
            gelu: GeluKind::Tanh,
        }
    }
}

/// Attention support restricted to `j <= i` for sequences up to `len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CausalMask {
    pub len: usize,
}

impl CausalMask {
    pub fn new(len: usize) -> Self {
        Self { len }
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        key <= query
    }
}

/// Parameter count of the bottleneck `f` at width `d`: `2·d·(d/2) + 2d`.
pub fn ftheta_param_count(d: u64) -> Result<u64> {
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "bottleneck width must be even, got {d}"
        )));
    }
    let r = d / 2;
    Ok(2 * d * r + 2 * d)
}

/// Records the query projection of `x` on `tape`.
pub fn record_query<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    query: &QueryWeights<Var>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    match query {
        QueryWeights::Linear { w_q } => tape.matmul(x, *w_q),
        QueryWeights::Identity => Ok(x),
        QueryWeights::ResidualGelu(b) => {
            let h = tape.rms_norm(x, b.rms_gain, cfg.norm_eps)?;
            let h = tape.matmul(h, b.w1)?;
            let h = tape.gelu(h, cfg.gelu);
            let h = tape.matmul(h, b.w2)?;
            let f = tape.layer_norm(h, b.ln_gain, cfg.norm_eps)?;
            let s = tape.add(x, f)?;
            Ok(tape.scale(s, T::of(cfg.query_scale)))
        }
    }
}

/// Records `MHA(x)` for `batch` stacked sequences of length `seq`.
pub fn record_mha<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttentionWeights<Var>,
    cfg: &AttentionConfig,
    batch: usize,
    seq: usize,
    causal: bool,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if cfg.n_head == 0 || !d.is_multiple_of(cfg.n_head) {
        return Err(Error::InvalidArgument(format!(
            "width {d} not divisible by {} heads",
            cfg.n_head
        )));
    }
    let q = record_query(tape, x, &w.query, cfg)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let shape = AttnShape {
        batch,
        seq,
        heads: cfg.n_head,
        head_dim: d / cfg.n_head,
        causal,
    };
    let a = tape.attention(q, k, v, shape)?;
    tape.matmul(a, w.w_o)
}

fn leaves<T: Scalar>(tape: &mut Tape<T>, w: &AttentionWeights<Tensor<T>>) -> AttentionWeights<Var> {
    w.try_map::<_, Error>("", &mut |_, t| Ok(tape.leaf(t.clone())))
        .expect("infallible")
}

fn check_input<T: Scalar>(x: &Tensor<T>, w: &AttentionWeights<Tensor<T>>, cfg: &AttentionConfig) -> Result<usize> {
    let d = w.width(cfg.n_head)?;
    if x.rank() != 2 || x.cols() != d {
        return Err(Error::shape("attention input", x.shape(), &[x.rows(), d]));
    }
    Ok(d)
}

/// `Q(X)` for the mode carried by `w`; each output row depends only on the same input row.
pub fn query_project<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<Tensor<T>>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    check_input(x, w, cfg)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = leaves(&mut tape, w);
    let q = record_query(&mut tape, xv, &wv.query, cfg)?;
    Ok(tape.value(q).clone())
}

/// Causal multi-head attention of a single sequence `X[n×d]`.
pub fn mha_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<Tensor<T>>,
    mask: &CausalMask,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    check_input(x, w, cfg)?;
    let n = x.rows();
    if n > mask.len {
        return Err(Error::InvalidArgument(format!(
            "sequence of {n} exceeds mask length {}",
            mask.len
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = leaves(&mut tape, w);
    let out = record_mha(&mut tape, xv, &wv, cfg, 1, n, true)?;
    Ok(tape.value(out).clone())
}

/// Unmasked scaled logits `Q^i K^iᵀ / √d_k`, one `[n×n]` matrix per head.
pub fn head_logits<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<Tensor<T>>,
    cfg: &AttentionConfig,
) -> Result<Vec<Tensor<T>>> {
    let d = check_input(x, w, cfg)?;
    let n = x.rows();
    let q = query_project(x, w, cfg)?;
    let k = ops::matmul(x, &w.w_k)?;
    let shape = AttnShape {
        batch: 1,
        seq: n,
        heads: cfg.n_head,
        head_dim: d / cfg.n_head,
        causal: false,
    };
    (0..cfg.n_head)
        .map(|h| {
            Tensor::new(
                [n, n],
                crate::numerics::kernels::head_logits(q.data(), k.data(), &shape, 0, h),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests;
