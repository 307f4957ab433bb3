//! Pre-generated batch offsets shared by every run of a comparison.

use super::rng::XorShift64Star;
use super::TrainConfig;
use crate::error::{Error, Result};

/// Mixed into the seed of the validation stream so it is independent of the
/// number of training steps.
const VAL_STREAM: u64 = 0x5641_4C5F_5345_5153;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub steps: usize,
    /// Sequences per optimizer step (`batch_size · grad_accum`).
    pub batch_size: usize,
    pub context_len: usize,
    /// Offsets into the training split, `steps · batch_size` entries in step order.
    pub train_offsets: Vec<usize>,
    /// Offsets into the validation split, used at every evaluation.
    pub val_offsets: Vec<usize>,
}

fn draw(rng: &mut XorShift64Star, len: usize, context_len: usize, count: usize, what: &str) -> Result<Vec<usize>> {
    if len <= context_len {
        return Err(Error::InvalidArgument(format!(
            "{what} split has {len} tokens, needs more than {context_len}"
        )));
    }
    // A window holds context_len inputs plus one shifted target.
    let starts = (len - context_len) as u64;
    Ok((0..count).map(|_| rng.below(starts) as usize).collect())
}

/// Draws uniform window starts with [`XorShift64Star`]: training offsets from
/// `seed`, validation offsets from `seed ^ VAL_STREAM`. Every window satisfies
/// `offset + context_len + 1 <= len`.
pub fn plan_batches(
    seed: u64,
    train_len: usize,
    val_len: usize,
    context_len: usize,
    cfg: &TrainConfig,
) -> Result<BatchPlan> {
    let batch_size = cfg.sequences_per_step();
    let mut rng = XorShift64Star::new(seed);
    let train_offsets = draw(
        &mut rng,
        train_len,
        context_len,
        cfg.total_steps * batch_size,
        "training",
    )?;
    let mut rng = XorShift64Star::new(seed ^ VAL_STREAM);
    let val_offsets = draw(&mut rng, val_len, context_len, cfg.eval_sequences, "validation")?;
    Ok(BatchPlan {
        seed,
        steps: cfg.total_steps,
        batch_size,
        context_len,
        train_offsets,
        val_offsets,
    })
}

impl BatchPlan {
    /// Offsets of the sequences for 1-based `step`.
    pub fn step_offsets(&self, step: usize) -> &[usize] {
        assert!((1..=self.steps).contains(&step), "step {step} outside plan");
        let b = self.batch_size;
        &self.train_offsets[(step - 1) * b..step * b]
    }

    /// Canonical little-endian encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [
            self.seed,
            self.steps as u64,
            self.batch_size as u64,
            self.context_len as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for list in [&self.train_offsets, &self.val_offsets] {
            out.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for &o in list {
                out.extend_from_slice(&(o as u64).to_le_bytes());
            }
        }
        out
    }
}

/// Inputs and shifted targets for windows at `offsets`, stacked.
pub fn gather(tokens: &[usize], offsets: &[usize], context_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(offsets.len() * context_len);
    let mut targets = Vec::with_capacity(offsets.len() * context_len);
    for &o in offsets {
        inputs.extend_from_slice(&tokens[o..o + context_len]);
        targets.extend_from_slice(&tokens[o + 1..o + context_len + 1]);
    }
    (inputs, targets)
}

/// 64-bit FNV-1a over the batch tokens as little-endian `u32`s.
pub fn batch_hash(inputs: &[usize], targets: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in inputs.iter().chain(targets) {
        for b in (t as u32).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
