//! Training and validation records, their CSV form, divergence detection and
//! run comparison.
//!
//! Logged values are kept as `f32` and printed with 9 significant digits,
//! which is enough for text to reproduce every non-NaN value bit for bit.

use crate::error::{Error, Result};
use crate::model::relative_improvement;

pub const CSV_HEADER: &str = "step,kind,loss,lr,grad_norm,diverged";
pub const COMPARE_HEADER: &str = "step,run,val_loss,baseline_loss,rel_improvement";

/// A run diverges when its loss is NaN, or exceeds this multiple of the
/// first logged loss ...
pub const DIVERGENCE_FACTOR: f64 = 3.0;
/// ... for this many consecutive steps.
pub const DIVERGENCE_WINDOW: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub val_loss: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub train: Vec<TrainRecord>,
    pub val: Vec<EvalRecord>,
}

fn fmt_f32(v: f32) -> String {
    format!("{v:.8e}")
}

fn same_bits(a: f32, b: f32) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_train(&mut self, r: TrainRecord) -> Result<()> {
        if self.train.last().is_some_and(|last| last.step >= r.step) {
            return Err(Error::InvalidArgument(format!(
                "train step {} is not increasing",
                r.step
            )));
        }
        self.train.push(r);
        Ok(())
    }

    pub fn push_val(&mut self, r: EvalRecord) -> Result<()> {
        if self.val.last().is_some_and(|last| last.step >= r.step) {
            return Err(Error::InvalidArgument(format!(
                "eval step {} is not increasing",
                r.step
            )));
        }
        self.val.push(r);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty()
    }

    pub fn eval_steps(&self) -> Vec<usize> {
        self.val.iter().map(|r| r.step).collect()
    }

    pub fn diverged(&self) -> bool {
        self.train.iter().any(|r| r.diverged)
    }

    /// Mean of the last `k` training losses.
    pub fn tail_train_loss(&self, k: usize) -> Option<f64> {
        let n = self.train.len().min(k);
        (n > 0).then(|| {
            self.train[self.train.len() - n..]
                .iter()
                .map(|r| r.loss as f64)
                .sum::<f64>()
                / n as f64
        })
    }

    /// Rows ordered by step; a train row precedes the val row of the same step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let (mut i, mut j) = (0, 0);
        while i < self.train.len() || j < self.val.len() {
            let take_train = match (self.train.get(i), self.val.get(j)) {
                (Some(t), Some(v)) => t.step <= v.step,
                (Some(_), None) => true,
                _ => false,
            };
            if take_train {
                let r = &self.train[i];
                out.push_str(&format!(
                    "{},train,{},{},{},{}\n",
                    r.step,
                    fmt_f32(r.loss),
                    fmt_f32(r.lr),
                    fmt_f32(r.grad_norm),
                    r.diverged as u8
                ));
                i += 1;
            } else {
                let r = &self.val[j];
                out.push_str(&format!("{},val,{},,,\n", r.step, fmt_f32(r.val_loss)));
                j += 1;
            }
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Format(format!("metrics CSV must start with '{CSV_HEADER}'")));
        }
        let mut log = Self::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: &str| Error::Format(format!("metrics line {}: {m}: '{line}'", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            let step: usize = f[0].parse().map_err(|_| err("bad step"))?;
            let num = |s: &str| s.parse::<f32>().map_err(|_| err("bad number"));
            match f[1] {
                "train" => log.push_train(TrainRecord {
                    step,
                    loss: num(f[2])?,
                    lr: num(f[3])?,
                    grad_norm: num(f[4])?,
                    diverged: match f[5] {
                        "0" => false,
                        "1" => true,
                        _ => return Err(err("diverged must be 0 or 1")),
                    },
                })?,
                "val" => {
                    if !(f[3].is_empty() && f[4].is_empty() && f[5].is_empty()) {
                        return Err(err("val rows carry only a loss"));
                    }
                    log.push_val(EvalRecord {
                        step,
                        val_loss: num(f[2])?,
                    })?
                }
                _ => return Err(err("kind must be train or val")),
            }
        }
        Ok(log)
    }

    /// Bitwise equality of every value; any two NaNs compare equal.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.train.len() == other.train.len()
            && self.val.len() == other.val.len()
            && self.train.iter().zip(&other.train).all(|(a, b)| {
                a.step == b.step
                    && a.diverged == b.diverged
                    && same_bits(a.loss, b.loss)
                    && same_bits(a.lr, b.lr)
                    && same_bits(a.grad_norm, b.grad_norm)
            })
            && self
                .val
                .iter()
                .zip(&other.val)
                .all(|(a, b)| a.step == b.step && same_bits(a.val_loss, b.val_loss))
    }
}

/// Streaming form of the divergence rule.
#[derive(Clone, Debug, Default)]
pub struct DivergenceMonitor {
    initial: Option<f64>,
    run_start: usize,
    run_len: usize,
}

impl DivergenceMonitor {
    /// Returns the first divergent step once the rule fires.
    pub fn observe(&mut self, step: usize, loss: f64, grad_norm: f64) -> Option<usize> {
        if !loss.is_finite() || grad_norm.is_nan() {
            return Some(step);
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            if self.run_len == 0 {
                self.run_start = step;
            }
            self.run_len += 1;
            if self.run_len >= DIVERGENCE_WINDOW {
                return Some(self.run_start);
            }
        } else {
            self.run_len = 0;
        }
        None
    }
}

/// First divergent step of `log`: a non-finite loss, or the start of the
/// first window of [`DIVERGENCE_WINDOW`] consecutive losses above
/// [`DIVERGENCE_FACTOR`] times the first logged loss.
pub fn detect_divergence(log: &MetricsLog) -> Option<usize> {
    let mut m = DivergenceMonitor::default();
    log.train
        .iter()
        .find_map(|r| m.observe(r.step, r.loss as f64, r.grad_norm as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub step: usize,
    pub run: String,
    pub val_loss: f64,
    pub baseline_loss: f64,
    pub rel_improvement: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub steps: Vec<usize>,
    pub runs: Vec<String>,
    /// Grouped by run in input order, then by step.
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn series(&self, run: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.run == run)
            .map(|r| (r.step, r.rel_improvement))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.8e},{:.8e},{:.8e}\n",
                r.step, r.run, r.val_loss, r.baseline_loss, r.rel_improvement
            ));
        }
        out
    }
}

/// Relative improvement of every run over `baseline` at each evaluation step.
/// All logs must share one non-empty evaluation grid.
pub fn compare_runs(runs: &[(String, MetricsLog)], baseline: &str) -> Result<Comparison> {
    let base = runs
        .iter()
        .find(|(id, _)| id == baseline)
        .map(|(_, log)| log)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline '{baseline}' not among the runs")))?;
    let steps = base.eval_steps();
    if steps.is_empty() {
        return Err(Error::InvalidArgument("baseline has no evaluation records".into()));
    }
    let mut rows = Vec::new();
    for (id, log) in runs {
        if id.contains(',') || id.contains('\n') {
            return Err(Error::InvalidArgument(format!("run id '{id}' cannot appear in CSV")));
        }
        if log.eval_steps() != steps {
            return Err(Error::InvalidArgument(format!(
                "run '{id}' evaluates on a different step grid"
            )));
        }
        for (r, b) in log.val.iter().zip(&base.val) {
            let (v, bl) = (r.val_loss as f64, b.val_loss as f64);
            rows.push(CompareRow {
                step: r.step,
                run: id.clone(),
                val_loss: v,
                baseline_loss: bl,
                rel_improvement: relative_improvement(bl, v)?,
            });
        }
    }
    Ok(Comparison {
        baseline: baseline.to_string(),
        steps,
        runs: runs.iter().map(|(id, _)| id.clone()).collect(),
        rows,
    })
}
