use crate::error::{Error, Result};
use crate::kv::KvMap;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub eval_sequences: usize,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer step.
    pub grad_accum: usize,
    /// Seeds both the parameter init and the batch plan.
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-3,
            min_lr: 1e-4,
            warmup_steps: 100,
            total_steps: 2000,
            weight_decay: 0.1,
            grad_clip: 1.0,
            eval_interval: 200,
            eval_sequences: 64,
            batch_size: 16,
            grad_accum: 1,
            seed: 1337,
            train_fraction: 0.9,
        }
    }
}

const KEYS: &[&str] = &[
    "max_lr",
    "min_lr",
    "warmup_steps",
    "total_steps",
    "weight_decay",
    "grad_clip",
    "eval_interval",
    "eval_sequences",
    "batch_size",
    "grad_accum",
    "seed",
    "train_fraction",
];

impl TrainConfig {
    /// Sequences consumed per optimizer step.
    pub fn sequences_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    /// Checks the invariants. `total_steps = 0` is accepted with any warmup and
    /// produces an untrained checkpoint.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.min_lr >= 0.0) || !(self.min_lr <= self.max_lr) || !self.max_lr.is_finite() {
            return bad(format!(
                "need 0 <= min_lr <= max_lr, got {} and {}",
                self.min_lr, self.max_lr
            ));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("weight_decay must be >= 0 and grad_clip > 0".into());
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.eval_interval == 0 || self.eval_sequences == 0 {
            return bad("batch_size, grad_accum, eval_interval and eval_sequences must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("max_lr", self.max_lr);
        m.set("min_lr", self.min_lr);
        m.set("warmup_steps", self.warmup_steps);
        m.set("total_steps", self.total_steps);
        m.set("weight_decay", self.weight_decay);
        m.set("grad_clip", self.grad_clip);
        m.set("eval_interval", self.eval_interval);
        m.set("eval_sequences", self.eval_sequences);
        m.set("batch_size", self.batch_size);
        m.set("grad_accum", self.grad_accum);
        m.set("seed", self.seed);
        m.set("train_fraction", self.train_fraction);
        m
    }

    /// Overrides fields of `base` with the training keys present in `m`.
    pub fn from_kv_over(base: &Self, m: &KvMap) -> Result<Self> {
        let cfg = Self {
            max_lr: m.get_or("max_lr", base.max_lr)?,
            min_lr: m.get_or("min_lr", base.min_lr)?,
            warmup_steps: m.get_or("warmup_steps", base.warmup_steps)?,
            total_steps: m.get_or("total_steps", base.total_steps)?,
            weight_decay: m.get_or("weight_decay", base.weight_decay)?,
            grad_clip: m.get_or("grad_clip", base.grad_clip)?,
            eval_interval: m.get_or("eval_interval", base.eval_interval)?,
            eval_sequences: m.get_or("eval_sequences", base.eval_sequences)?,
            batch_size: m.get_or("batch_size", base.batch_size)?,
            grad_accum: m.get_or("grad_accum", base.grad_accum)?,
            seed: m.get_or("seed", base.seed)?,
            train_fraction: m.get_or("train_fraction", base.train_fraction)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        m.check_known(KEYS)?;
        Self::from_kv_over(&Self::default(), m)
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}
