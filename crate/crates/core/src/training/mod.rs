//! Deterministic training harness: data, batch plans, schedule, metrics and the loop.

mod config;
pub mod data;
pub mod metrics;
pub mod plan;
pub mod rng;
mod schedule;
mod trainer;

pub use config::TrainConfig;
pub use data::{split, synthetic_corpus, tokenize_corpus, unigram_entropy, Tokenizer, TokenizerKind};
pub use metrics::{compare_runs, detect_divergence, Comparison, EvalRecord, MetricsLog, TrainRecord};
pub use plan::{batch_hash, plan_batches, BatchPlan};
pub use schedule::lr_schedule;
pub use trainer::{evaluate, train, TrainOutcome};

#[cfg(test)]
mod tests;
