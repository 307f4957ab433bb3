use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionConfig, QueryMode};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::numerics::GeluKind;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    /// MLP hidden width as a multiple of `d_model`.
    pub mlp_mult: f64,
    pub context_len: usize,
    pub vocab_size: usize,
    pub query_mode: QueryMode,
    pub norm_eps: f64,
    pub query_scale: f64,
    pub gelu: GeluKind,
}

/// The 12-layer, 768-wide configurations compared at full scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceVariant {
    Baseline,
    /// Baseline with MLP multiplier 4.75.
    Mlp475,
    ResidualGelu,
    Identity,
}

impl ReferenceVariant {
    pub const ALL: [ReferenceVariant; 4] = [Self::Baseline, Self::Mlp475, Self::ResidualGelu, Self::Identity];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Mlp475 => "mlp475",
            Self::ResidualGelu => "residual-gelu",
            Self::Identity => "identity",
        }
    }
}

impl fmt::Display for ReferenceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReferenceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(QueryMode::Linear)
    }
}

const KEYS: &[&str] = &[
    "n_layer",
    "n_head",
    "d_model",
    "mlp_mult",
    "context_len",
    "vocab_size",
    "query_mode",
    "norm_eps",
    "query_scale",
    "gelu",
];

impl ModelConfig {
    /// GPT-2 small shape. The vocabulary is the GPT-2 BPE size padded to a
    /// multiple of 64, as in common reference trainers; it only affects
    /// embedding counts.
    pub fn reference(variant: ReferenceVariant) -> Self {
        let query_mode = match variant {
            ReferenceVariant::Baseline | ReferenceVariant::Mlp475 => QueryMode::Linear,
            ReferenceVariant::ResidualGelu => QueryMode::ResidualGelu,
            ReferenceVariant::Identity => QueryMode::Identity,
        };
        Self {
            n_layer: 12,
            n_head: 12,
            d_model: 768,
            mlp_mult: if variant == ReferenceVariant::Mlp475 { 4.75 } else { 4.0 },
            context_len: 1024,
            vocab_size: 50304,
            query_mode,
            norm_eps: AttentionConfig::DEFAULT_NORM_EPS,
            query_scale: AttentionConfig::DEFAULT_QUERY_SCALE,
            gelu: GeluKind::Tanh,
        }
    }

    /// Small byte-level model: 4 layers, width 64, context 128.
    pub fn toy(query_mode: QueryMode) -> Self {
        Self {
            n_layer: 4,
            n_head: 4,
            d_model: 64,
            mlp_mult: 4.0,
            context_len: 128,
            vocab_size: 256,
            query_mode,
            norm_eps: AttentionConfig::DEFAULT_NORM_EPS,
            query_scale: AttentionConfig::DEFAULT_QUERY_SCALE,
            gelu: GeluKind::Tanh,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_mult * self.d_model as f64).round() as usize
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n_head: self.n_head,
            norm_eps: self.norm_eps,
            query_scale: self.query_scale,
            gelu: self.gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_head == 0 || !self.d_model.is_multiple_of(self.n_head) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_head {}",
                self.d_model, self.n_head
            ));
        }
        if self.query_mode == QueryMode::ResidualGelu && !self.d_model.is_multiple_of(2) {
            return bad(format!("residual-gelu queries need even d_model, got {}", self.d_model));
        }
        if self.context_len == 0 || self.vocab_size == 0 {
            return bad("context_len and vocab_size must be positive".into());
        }
        if !(self.mlp_mult > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_mult {} gives an empty MLP", self.mlp_mult));
        }
        if !(self.norm_eps > 0.0) || !self.query_scale.is_finite() {
            return bad("norm_eps must be positive and query_scale finite".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("n_layer", self.n_layer);
        m.set("n_head", self.n_head);
        m.set("d_model", self.d_model);
        m.set("mlp_mult", self.mlp_mult);
        m.set("context_len", self.context_len);
        m.set("vocab_size", self.vocab_size);
        m.set("query_mode", self.query_mode);
        m.set("norm_eps", self.norm_eps);
        m.set("query_scale", self.query_scale);
        m.set("gelu", gelu_name(self.gelu));
        m
    }

    /// Overrides fields of `base` with the model keys present in `m`; other keys are ignored.
    pub fn from_kv_over(base: &Self, m: &KvMap) -> Result<Self> {
        let gelu = match m.get_str("gelu") {
            None => base.gelu,
            Some("tanh") => GeluKind::Tanh,
            Some("erf") => GeluKind::Erf,
            Some(other) => return Err(Error::Config(format!("gelu must be tanh or erf, got '{other}'"))),
        };
        let cfg = Self {
            n_layer: m.get_or("n_layer", base.n_layer)?,
            n_head: m.get_or("n_head", base.n_head)?,
            d_model: m.get_or("d_model", base.d_model)?,
            mlp_mult: m.get_or("mlp_mult", base.mlp_mult)?,
            context_len: m.get_or("context_len", base.context_len)?,
            vocab_size: m.get_or("vocab_size", base.vocab_size)?,
            query_mode: match m.get_str("query_mode") {
                Some(s) => s.parse()?,
                None => base.query_mode,
            },
            norm_eps: m.get_or("norm_eps", base.norm_eps)?,
            query_scale: m.get_or("query_scale", base.query_scale)?,
            gelu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Strict parse: every key must be a model key.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        m.check_known(KEYS)?;
        Self::from_kv_over(&Self::default(), m)
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}

fn gelu_name(g: GeluKind) -> &'static str {
    match g {
        GeluKind::Tanh => "tanh",
        GeluKind::Erf => "erf",
    }
}
