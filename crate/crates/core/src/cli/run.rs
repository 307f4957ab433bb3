//! Training runs as driven by `resq train`: config resolution, data loading,
//! and the artifact set written per run.

use std::path::{Path, PathBuf};

use super::fsio::{unique_run_id, write_atomic};
use super::svg::{line_chart, Series};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{checkpoint, ModelConfig};
use crate::training::{
    plan_batches, split, synthetic_corpus, tokenize_corpus, train, unigram_entropy, EvalRecord, TokenizerKind,
    TrainConfig, TrainOutcome, TrainRecord,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.rqck";
pub const PLOT_FILE: &str = "loss.svg";

const DATA_KEYS: &[&str] = &["run_id", "corpus", "tokenizer", "corpus_bytes", "corpus_seed"];
/// Written to manifests for the record and ignored when a manifest is read back as a config.
const RESULT_KEYS: &[&str] = &[
    "checkpoint",
    "metrics",
    "plot",
    "plan_hash",
    "unigram_entropy",
    "steps_completed",
    "diverged_at",
    "final_train_loss",
    "final_val_loss",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    /// Text file to train on; the built-in synthetic corpus when absent.
    pub corpus: Option<PathBuf>,
    pub tokenizer: TokenizerKind,
    pub corpus_bytes: usize,
    pub corpus_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            corpus: None,
            tokenizer: TokenizerKind::Bytes,
            corpus_bytes: crate::training::data::DEFAULT_CORPUS_BYTES,
            corpus_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub vocab_size: usize,
    /// Unigram entropy of the whole token stream, in nats.
    pub entropy: f64,
}

impl DataSpec {
    pub fn bytes(&self) -> Result<Vec<u8>> {
        match &self.corpus {
            Some(p) => std::fs::read(p).map_err(|e| Error::Config(format!("cannot read corpus {}: {e}", p.display()))),
            None => Ok(synthetic_corpus(self.corpus_bytes, self.corpus_seed)),
        }
    }

    pub fn load(&self, train_fraction: f64) -> Result<Dataset> {
        let (tokens, tok) = tokenize_corpus(&self.bytes()?, self.tokenizer)?;
        let (tr, va) = split(&tokens, train_fraction)?;
        Ok(Dataset {
            train: tr.to_vec(),
            val: va.to_vec(),
            vocab_size: tok.vocab_size(),
            entropy: unigram_entropy(&tokens),
        })
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunSpec {
    pub run_id: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
}

impl RunSpec {
    /// Applies every key in `m` on top of `self`. Unknown keys are rejected.
    pub fn apply(&self, m: &KvMap) -> Result<Self> {
        let known: Vec<&str> = ModelConfig::keys()
            .iter()
            .chain(TrainConfig::keys())
            .chain(DATA_KEYS)
            .chain(RESULT_KEYS)
            .copied()
            .collect();
        m.check_known(&known)?;
        let d = &self.data;
        Ok(Self {
            run_id: m.get_str("run_id").map(str::to_string).or_else(|| self.run_id.clone()),
            model: ModelConfig::from_kv_over(&self.model, m)?,
            train: TrainConfig::from_kv_over(&self.train, m)?,
            data: DataSpec {
                corpus: m.get_str("corpus").map(PathBuf::from).or_else(|| d.corpus.clone()),
                tokenizer: m.get("tokenizer")?.unwrap_or(d.tokenizer),
                corpus_bytes: m.get_or("corpus_bytes", d.corpus_bytes)?,
                corpus_seed: m.get_or("corpus_seed", d.corpus_seed)?,
            },
        })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = self.model.to_kv();
        m.merge(&self.train.to_kv());
        if let Some(id) = &self.run_id {
            m.set("run_id", id);
        }
        match &self.data.corpus {
            Some(p) => m.set("corpus", p.display()),
            None => {
                m.set("corpus_bytes", self.data.corpus_bytes);
                m.set("corpus_seed", self.data.corpus_seed);
            }
        }
        m.set("tokenizer", self.data.tokenizer);
        m
    }

    fn default_run_id(&self) -> String {
        format!("{}-seed{}", self.model.query_mode, self.train.seed)
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub run_id: String,
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
    pub dataset_entropy: f64,
    pub spec: RunSpec,
}

impl RunResult {
    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

fn loss_plot(title: &str, outcome: &TrainOutcome) -> String {
    let train = Series {
        name: "train".into(),
        points: outcome
            .log
            .train
            .iter()
            .map(|r| (r.step as f64, r.loss as f64))
            .collect(),
    };
    let val = Series {
        name: "val".into(),
        points: outcome
            .log
            .val
            .iter()
            .map(|r| (r.step as f64, r.val_loss as f64))
            .collect(),
    };
    line_chart(title, "step", "loss (nats/token)", &[train, val])
}

/// Trains `spec` and writes manifest, metrics CSV, checkpoint and loss plot
/// under `out_dir/<run id>`. The model vocabulary is taken from the tokenizer.
/// Without an explicit run id a fresh directory name is chosen; an explicit
/// id reuses its directory, so a rerun of the same manifest overwrites it
/// with identical bytes.
pub fn execute(
    spec: &RunSpec,
    out_dir: &Path,
    on_step: impl FnMut(&TrainRecord, Option<&EvalRecord>),
) -> Result<RunResult> {
    let data = spec.data.load(spec.train.train_fraction)?;
    let mut spec = spec.clone();
    spec.model.vocab_size = data.vocab_size;
    spec.model.validate()?;
    let run_id = match &spec.run_id {
        Some(id) => {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(Error::Config(format!("invalid run id '{id}'")));
            }
            id.clone()
        }
        None => unique_run_id(out_dir, &spec.default_run_id()),
    };
    spec.run_id = Some(run_id.clone());
    let dir = out_dir.join(&run_id);
    std::fs::create_dir_all(&dir)?;

    let plan = plan_batches(
        spec.train.seed,
        data.train.len(),
        data.val.len(),
        spec.model.context_len,
        &spec.train,
    )?;
    let outcome = train(&spec.model, &spec.train, &plan, &data.train, &data.val, on_step)?;

    write_atomic(&dir.join(METRICS_FILE), outcome.log.to_csv().as_bytes())?;
    write_atomic(
        &dir.join(CHECKPOINT_FILE),
        &checkpoint::encode(&spec.model, &outcome.params)?,
    )?;
    let title = format!("{} queries, seed {}", spec.model.query_mode, spec.train.seed);
    write_atomic(&dir.join(PLOT_FILE), loss_plot(&title, &outcome).as_bytes())?;

    let mut m = spec.to_kv();
    m.set("checkpoint", CHECKPOINT_FILE);
    m.set("metrics", METRICS_FILE);
    m.set("plot", PLOT_FILE);
    m.set(
        "plan_hash",
        format!(
            "{:016x}",
            crate::training::plan::batch_hash(&plan.train_offsets, &plan.val_offsets)
        ),
    );
    m.set("unigram_entropy", format!("{:.8e}", data.entropy));
    m.set("steps_completed", outcome.log.train.len());
    m.set(
        "diverged_at",
        outcome.diverged_at.map_or("none".to_string(), |s| s.to_string()),
    );
    if let Some(l) = outcome.log.train.last() {
        m.set("final_train_loss", format!("{:.8e}", l.loss));
    }
    if let Some(v) = outcome.log.val.last() {
        m.set("final_val_loss", format!("{:.8e}", v.val_loss));
    }
    let text = format!("# resq run manifest\n{}", m.to_text());
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;

    Ok(RunResult {
        run_id,
        dir,
        outcome,
        dataset_entropy: data.entropy,
        spec,
    })
}
