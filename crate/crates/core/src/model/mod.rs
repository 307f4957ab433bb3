//! Pre-norm decoder-only transformer with tied token embedding and LM head.

pub mod checkpoint;
mod config;
mod count;

pub use config::{ModelConfig, ReferenceVariant};
pub use count::{count_params, relative_improvement, ParamCount};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{record_mha, AttentionWeights, Bottleneck, QueryMode, QueryWeights};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, ops, GradCheckOptions, GradCheckReport, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub ln1_gain: P,
    pub attn: AttentionWeights<P>,
    pub ln2_gain: P,
    /// `[d × m]`
    pub mlp_in: P,
    /// `[m × d]`
    pub mlp_out: P,
}

/// All learnable parameters. The token embedding doubles as the LM head, so
/// there is no separate output matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<P> {
    /// `[V × d]`
    pub tok_emb: P,
    /// `[context × d]`
    pub pos_emb: P,
    pub blocks: Vec<Block<P>>,
    pub ln_f_gain: P,
}

impl<P> TransformerParams<P> {
    /// Visits parameters in canonical (checkpoint and optimizer) order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        f("tok_emb".into(), &self.tok_emb);
        f("pos_emb".into(), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("layers.{i}.ln1.gain"), &b.ln1_gain);
            b.attn.visit(&format!("layers.{i}.attn."), f);
            f(format!("layers.{i}.ln2.gain"), &b.ln2_gain);
            f(format!("layers.{i}.mlp.w_in"), &b.mlp_in);
            f(format!("layers.{i}.mlp.w_out"), &b.mlp_out);
        }
        f("ln_f.gain".into(), &self.ln_f_gain);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut P)) {
        f("tok_emb".into(), &mut self.tok_emb);
        f("pos_emb".into(), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("layers.{i}.ln1.gain"), &mut b.ln1_gain);
            b.attn.visit_mut(&format!("layers.{i}.attn."), f);
            f(format!("layers.{i}.ln2.gain"), &mut b.ln2_gain);
            f(format!("layers.{i}.mlp.w_in"), &mut b.mlp_in);
            f(format!("layers.{i}.mlp.w_out"), &mut b.mlp_out);
        }
        f("ln_f.gain".into(), &mut self.ln_f_gain);
    }

    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(String, &P) -> Result<Q, E>) -> Result<TransformerParams<Q>, E> {
        let tok_emb = f("tok_emb".into(), &self.tok_emb)?;
        let pos_emb = f("pos_emb".into(), &self.pos_emb)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let ln1_gain = f(format!("layers.{i}.ln1.gain"), &b.ln1_gain)?;
            let attn = b.attn.try_map(&format!("layers.{i}.attn."), f)?;
            let ln2_gain = f(format!("layers.{i}.ln2.gain"), &b.ln2_gain)?;
            let mlp_in = f(format!("layers.{i}.mlp.w_in"), &b.mlp_in)?;
            let mlp_out = f(format!("layers.{i}.mlp.w_out"), &b.mlp_out)?;
            blocks.push(Block {
                ln1_gain,
                attn,
                ln2_gain,
                mlp_in,
                mlp_out,
            });
        }
        let ln_f_gain = f("ln_f.gain".into(), &self.ln_f_gain)?;
        Ok(TransformerParams {
            tok_emb,
            pos_emb,
            blocks,
            ln_f_gain,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(String, &P) -> Q) -> TransformerParams<Q> {
        self.try_map::<Q, std::convert::Infallible>(&mut |n, p| Ok(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }

    pub fn values(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, p| out.push(p));
        out
    }

    /// Rebuilds this structure from values listed in canonical order.
    pub fn with_values<Q>(&self, values: Vec<Q>) -> Result<TransformerParams<Q>> {
        let want = self.names().len();
        if values.len() != want {
            return Err(Error::InvalidArgument(format!(
                "expected {want} parameters, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        Ok(self.map(|_, _| it.next().expect("length checked")))
    }
}

/// Role of a parameter; decides initialization and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Matrix,
    /// Matrices writing into the residual stream (`W_O`, MLP out, bottleneck `W2`).
    ResidualOut,
    Gain,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Matrix | ParamKind::ResidualOut)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(shape: impl Into<Vec<usize>>, kind: ParamKind) -> Self {
        Self {
            shape: shape.into(),
            kind,
        }
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&s| s as u64).product()
    }
}

/// Shapes and roles of every parameter for `cfg`.
pub fn layout(cfg: &ModelConfig) -> TransformerParams<ParamSpec> {
    use ParamKind::*;
    let d = cfg.d_model;
    let m = cfg.mlp_hidden();
    let block = || Block {
        ln1_gain: ParamSpec::new([d], Gain),
        attn: AttentionWeights {
            query: match cfg.query_mode {
                QueryMode::Linear => QueryWeights::Linear {
                    w_q: ParamSpec::new([d, d], Matrix),
                },
                QueryMode::Identity => QueryWeights::Identity,
                QueryMode::ResidualGelu => QueryWeights::ResidualGelu(Bottleneck {
                    w1: ParamSpec::new([d, d / 2], Matrix),
                    w2: ParamSpec::new([d / 2, d], ResidualOut),
                    rms_gain: ParamSpec::new([d], Gain),
                    ln_gain: ParamSpec::new([d], Gain),
                }),
            },
            w_k: ParamSpec::new([d, d], Matrix),
            w_v: ParamSpec::new([d, d], Matrix),
            w_o: ParamSpec::new([d, d], ResidualOut),
        },
        ln2_gain: ParamSpec::new([d], Gain),
        mlp_in: ParamSpec::new([d, m], Matrix),
        mlp_out: ParamSpec::new([m, d], ResidualOut),
    };
    TransformerParams {
        tok_emb: ParamSpec::new([cfg.vocab_size, d], Embedding),
        pos_emb: ParamSpec::new([cfg.context_len, d], Embedding),
        blocks: (0..cfg.n_layer).map(|_| block()).collect(),
        ln_f_gain: ParamSpec::new([d], Gain),
    }
}

pub const INIT_STD: f64 = 0.02;

/// Gaussian initialization: std 0.02, residual-output matrices scaled by
/// `1/√(2·n_layer)`, gains at 1. Tensors are drawn from one ChaCha8 stream
/// seeded with `seed`, in canonical order.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<TransformerParams<Tensor<T>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resid_std = INIT_STD / (2.0 * cfg.n_layer.max(1) as f64).sqrt();
    Ok(layout(cfg).map(|_, spec| match spec.kind {
        ParamKind::Gain => Tensor::full(spec.shape.clone(), T::one()),
        ParamKind::Embedding | ParamKind::Matrix => Tensor::randn(spec.shape.clone(), INIT_STD, &mut rng),
        ParamKind::ResidualOut => Tensor::randn(spec.shape.clone(), resid_std, &mut rng),
    }))
}

/// Registers every parameter as a tape leaf.
pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &TransformerParams<Tensor<T>>) -> TransformerParams<Var> {
    params.map(|_, t| tape.leaf(t.clone()))
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize], batch: usize) -> Result<usize> {
    if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
        return Err(Error::InvalidArgument(format!(
            "{} tokens do not split into {batch} sequences",
            tokens.len()
        )));
    }
    let seq = tokens.len() / batch;
    if seq > cfg.context_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {seq} exceeds context {}",
            cfg.context_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TargetOutOfRange {
            index: t,
            vocab: cfg.vocab_size,
        });
    }
    Ok(seq)
}

/// Records the forward pass of `batch` sequences stacked in `tokens`;
/// returns logits `[batch·seq × V]`.
pub fn record_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &TransformerParams<Var>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
) -> Result<Var> {
    let seq = check_tokens(cfg, tokens, batch)?;
    let acfg = cfg.attention();
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.embedding(vars.tok_emb, tokens)?;
    let pos = tape.embedding(vars.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for b in &vars.blocks {
        let h = tape.layer_norm(x, b.ln1_gain, cfg.norm_eps)?;
        let a = record_mha(tape, h, &b.attn, &acfg, batch, seq, true)?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, b.ln2_gain, cfg.norm_eps)?;
        let h = tape.matmul(h, b.mlp_in)?;
        let h = tape.gelu(h, cfg.gelu);
        let h = tape.matmul(h, b.mlp_out)?;
        x = tape.add(x, h)?;
    }
    let x = tape.layer_norm(x, vars.ln_f_gain, cfg.norm_eps)?;
    tape.matmul_bt(x, vars.tok_emb)
}

/// Logits `[n × V]` for one sequence.
pub fn forward<T: Scalar>(
    params: &TransformerParams<Tensor<T>>,
    tokens: &[usize],
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    forward_batch(params, tokens, 1, cfg)
}

pub fn forward_batch<T: Scalar>(
    params: &TransformerParams<Tensor<T>>,
    tokens: &[usize],
    batch: usize,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params);
    let logits = record_forward(&mut tape, &vars, cfg, tokens, batch)?;
    Ok(tape.value(logits).clone())
}

/// Mean next-token loss over the batch and its gradient for every parameter.
pub fn loss_and_grads<T: Scalar>(
    params: &TransformerParams<Tensor<T>>,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    cfg: &ModelConfig,
) -> Result<(f64, TransformerParams<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params);
    let logits = record_forward(&mut tape, &vars, cfg, inputs, batch)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let loss_value = tape.value(loss).item().as_f64();
    let mut grads = tape.backward(loss)?;
    let values = params.values();
    let mut i = 0;
    let g = vars.map(|_, v| {
        let t = grads.take_or_zero(*v, values[i]);
        i += 1;
        t
    });
    Ok((loss_value, g))
}

/// Mean next-token loss of each sequence, in `f64`. Rows of a batch never
/// interact, so the value for a sequence does not depend on its batch mates.
pub fn sequence_losses<T: Scalar>(
    params: &TransformerParams<Tensor<T>>,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let logits = forward_batch(params, inputs, batch, cfg)?;
    let nll = ops::cross_entropy_per_row(&logits, targets)?;
    let seq = inputs.len() / batch;
    Ok(nll.chunks(seq).map(|c| c.iter().sum::<f64>() / seq as f64).collect())
}

/// Greedy continuation; a smoke tool, not a sampler.
pub fn greedy_generate<T: Scalar>(
    params: &TransformerParams<Tensor<T>>,
    prompt: &[usize],
    steps: usize,
    cfg: &ModelConfig,
) -> Result<Vec<usize>> {
    let mut out = prompt.to_vec();
    for _ in 0..steps {
        let start = out.len().saturating_sub(cfg.context_len);
        let logits = forward(params, &out[start..], cfg)?;
        let last = logits.row(logits.rows() - 1);
        let best = (0..last.len())
            .max_by(|&a, &b| last[a].partial_cmp(&last[b]).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(0);
        out.push(best);
    }
    Ok(out)
}

/// Total element count of a parameter set.
pub fn numel<T: Scalar>(params: &TransformerParams<Tensor<T>>) -> u64 {
    params.values().iter().map(|t| t.numel() as u64).sum()
}

/// Gradient threshold for the full model.
pub const MODEL_GRAD_TOL: f64 = 1e-4;

/// Model used by the full-model gradient check: width 8, 2 layers, 2 heads,
/// vocabulary 11, sequence length 4.
pub fn gradcheck_config(mode: QueryMode) -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 8,
        mlp_mult: 4.0,
        context_len: 4,
        vocab_size: 11,
        query_mode: mode,
        ..ModelConfig::toy(mode)
    }
}

/// Finite-difference check of every parameter group of `cfg` on one random
/// sequence of length `context_len`. Weights are drawn at unit-ish scale
/// rather than the training init so gradients sit well above roundoff.
pub fn grad_check_model(cfg: &ModelConfig, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    use rand::Rng;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = layout(cfg);
    let params = spec.map(|_, s| match s.kind {
        ParamKind::Gain => Tensor::<f64>::randn(s.shape.clone(), 0.2, &mut rng).map(|g| 1.0 + g),
        ParamKind::Embedding => Tensor::randn(s.shape.clone(), 1.0, &mut rng),
        ParamKind::Matrix | ParamKind::ResidualOut => {
            Tensor::randn(s.shape.clone(), 1.0 / (s.shape[0] as f64).sqrt(), &mut rng)
        }
    });
    let n = cfg.context_len;
    let inputs: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let named: Vec<(String, Tensor<f64>)> = spec
        .names()
        .into_iter()
        .zip(params.values().into_iter().cloned())
        .collect();
    grad_check(
        |tape, vars| {
            let v = spec.with_values(vars.to_vec())?;
            let logits = record_forward(tape, &v, cfg, &inputs, 1)?;
            tape.cross_entropy(logits, &targets)
        },
        &named,
        opts,
    )
}

#[cfg(test)]
mod tests;
