//! `resq` command line: train, verify, gradcheck, params, compare, corpus.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification failure,
//! 3 training divergence.

pub mod fsio;
pub mod run;
pub mod svg;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::verify::{
    absorption_suite, escape_suite, reparametrization_suite, symmetry_suite, SuiteReport, VerifyDims,
};
use crate::attention::{ftheta_param_count, QueryMode};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{count_params, grad_check_model, gradcheck_config, ModelConfig, ReferenceVariant, MODEL_GRAD_TOL};
use crate::numerics::{
    linear_micro_check, primitive_suite, GradCheckOptions, GradCheckReport, LINEAR_TOL, PRIMITIVE_TOL,
};
use crate::training::{compare_runs, synthetic_corpus, unigram_entropy, MetricsLog};
use fsio::{out_dir, write_atomic};
use run::{execute, RunSpec};
use svg::{line_chart, sparkline, Series};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Seed of the default model gradient check.
pub const GRADCHECK_SEED: u64 = 17;

#[derive(Parser, Debug)]
#[command(
    name = "resq",
    version,
    about = "Residual nonlinear query attention: training and verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train a model and write manifest, metrics, checkpoint and loss plot.
    Train(TrainArgs),
    /// Check reparametrization invariance, query absorption, logit symmetry and nonlinear escape.
    Verify(VerifyArgs),
    /// Finite-difference check of every primitive and of the full model in each query mode.
    Gradcheck(GradcheckArgs),
    /// Parameter counts for a config or the full-size reference configs.
    Params(ParamsArgs),
    /// Relative validation improvement of runs over a baseline (CSV + SVG).
    Compare(CompareArgs),
    /// Write the built-in synthetic corpus.
    Corpus(CorpusArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct ModelOverrides {
    #[arg(long, value_name = "N")]
    pub n_layer: Option<String>,
    #[arg(long, value_name = "N")]
    pub n_head: Option<String>,
    #[arg(long, value_name = "N")]
    pub d_model: Option<String>,
    #[arg(long, value_name = "X")]
    pub mlp_mult: Option<String>,
    #[arg(long, value_name = "N")]
    pub context_len: Option<String>,
    #[arg(long, value_name = "N")]
    pub vocab_size: Option<String>,
    /// linear | identity | residual-gelu
    #[arg(long = "mode", alias = "query-mode", value_name = "MODE")]
    pub query_mode: Option<String>,
    #[arg(long, value_name = "X")]
    pub norm_eps: Option<String>,
    #[arg(long, value_name = "X")]
    pub query_scale: Option<String>,
    /// tanh | erf
    #[arg(long, value_name = "KIND")]
    pub gelu: Option<String>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainOverrides {
    #[arg(long, value_name = "X")]
    pub max_lr: Option<String>,
    #[arg(long, value_name = "X")]
    pub min_lr: Option<String>,
    #[arg(long = "warmup", alias = "warmup-steps", value_name = "N")]
    pub warmup_steps: Option<String>,
    #[arg(long = "steps", alias = "total-steps", value_name = "N")]
    pub total_steps: Option<String>,
    #[arg(long = "wd", alias = "weight-decay", value_name = "X")]
    pub weight_decay: Option<String>,
    #[arg(long, value_name = "X")]
    pub grad_clip: Option<String>,
    #[arg(long, value_name = "N")]
    pub eval_interval: Option<String>,
    #[arg(long, value_name = "N")]
    pub eval_sequences: Option<String>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<String>,
    #[arg(long, value_name = "N")]
    pub grad_accum: Option<String>,
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    #[arg(long, value_name = "X")]
    pub train_fraction: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Key-value config file (a run manifest also works).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOverrides,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Text corpus; defaults to the built-in synthetic corpus.
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<String>,
    /// bytes | chars
    #[arg(long, value_name = "KIND")]
    pub tokenizer: Option<String>,
    #[arg(long, value_name = "N")]
    pub corpus_bytes: Option<String>,
    #[arg(long, value_name = "N")]
    pub corpus_seed: Option<String>,
    #[arg(long, value_name = "ID")]
    pub run_id: Option<String>,
    /// Output directory (default: $RESQ_OUT_DIR, else ./runs).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print only the final summary.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Model width.
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = GRADCHECK_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 11)]
    pub vocab: usize,
    /// Coordinates sampled per parameter.
    #[arg(long, default_value_t = 64)]
    pub coords: usize,
    /// Central-difference step for the model check.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOverrides,
    /// baseline | mlp475 | residual-gelu | identity | all
    #[arg(long, visible_alias = "paper", value_name = "VARIANT")]
    pub reference: Option<String>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Metrics CSVs as ID=PATH or PATH (the ID is then the run directory name
    /// for `metrics.csv` files, else the file stem).
    #[arg(required = true, num_args = 2.., value_name = "RUN")]
    pub runs: Vec<String>,
    #[arg(long, value_name = "ID")]
    pub baseline: String,
    /// Output directory (default: $RESQ_OUT_DIR, else ./runs).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Output file stem.
    #[arg(long, default_value = "compare")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::training::data::DEFAULT_CORPUS_BYTES)]
    pub bytes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ModelOverrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("n_layer", &self.n_layer),
            ("n_head", &self.n_head),
            ("d_model", &self.d_model),
            ("mlp_mult", &self.mlp_mult),
            ("context_len", &self.context_len),
            ("vocab_size", &self.vocab_size),
            ("query_mode", &self.query_mode),
            ("norm_eps", &self.norm_eps),
            ("query_scale", &self.query_scale),
            ("gelu", &self.gelu),
        ]
    }
}

impl TrainOverrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("max_lr", &self.max_lr),
            ("min_lr", &self.min_lr),
            ("warmup_steps", &self.warmup_steps),
            ("total_steps", &self.total_steps),
            ("weight_decay", &self.weight_decay),
            ("grad_clip", &self.grad_clip),
            ("eval_interval", &self.eval_interval),
            ("eval_sequences", &self.eval_sequences),
            ("batch_size", &self.batch_size),
            ("grad_accum", &self.grad_accum),
            ("seed", &self.seed),
            ("train_fraction", &self.train_fraction),
        ]
    }
}

fn overrides_map(pairs: &[(&'static str, &Option<String>)], sets: &[String]) -> Result<KvMap> {
    let mut m = KvMap::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        m.set(k.trim(), v.trim());
    }
    for (k, v) in pairs {
        if let Some(v) = v {
            m.set(k, v);
        }
    }
    Ok(m)
}

fn read_config(path: Option<&Path>) -> Result<KvMap> {
    match path {
        None => Ok(KvMap::new()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            KvMap::parse(&text)
        }
    }
}

/// Config file, then explicit flags, on top of the defaults.
pub fn resolve_train_spec(args: &TrainArgs) -> Result<RunSpec> {
    let mut pairs = args.model.pairs();
    pairs.extend(args.train.pairs());
    let extra = [
        ("corpus", &args.corpus),
        ("tokenizer", &args.tokenizer),
        ("corpus_bytes", &args.corpus_bytes),
        ("corpus_seed", &args.corpus_seed),
        ("run_id", &args.run_id),
    ];
    pairs.extend(extra);
    let spec = RunSpec::default().apply(&read_config(args.config.as_deref())?)?;
    spec.apply(&overrides_map(&pairs, &args.set)?)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Params(a) => cmd_params(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Corpus(a) => cmd_corpus(&a),
    }
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let spec = resolve_train_spec(args)?;
    let dir = out_dir(args.out.as_deref());
    let total = spec.train.total_steps;
    let every = (total / 20).max(1);
    let quiet = args.quiet;
    let res = execute(&spec, &dir, |r, v| {
        if quiet {
            return;
        }
        if let Some(v) = v {
            eprintln!("step {:>6}/{total}  val {:.4}", v.step, v.val_loss);
        }
        if r.step % every == 0 || r.diverged {
            eprintln!(
                "step {:>6}/{total}  loss {:.4}  lr {:.3e}  |g| {:.3}{}",
                r.step,
                r.loss,
                r.lr,
                r.grad_norm,
                if r.diverged { "  DIVERGED" } else { "" }
            );
        }
    })?;

    let log = &res.outcome.log;
    println!("run {}", res.run_id);
    println!("  dir              {}", res.dir.display());
    println!("  steps completed  {}", log.train.len());
    println!("  unigram entropy  {:.4} nats", res.dataset_entropy);
    if let Some(l) = log.tail_train_loss(50) {
        println!("  train loss       {l:.4} (mean of last 50 steps)");
    }
    if let Some(v) = log.val.last() {
        println!("  val loss         {:.4} (step {})", v.val_loss, v.step);
    }
    let losses: Vec<f64> = log.train.iter().map(|r| r.loss as f64).collect();
    if !losses.is_empty() {
        println!("  loss curve       [{}]", sparkline(&losses, 60));
    }
    match res.outcome.diverged_at {
        Some(step) => {
            println!("  DIVERGED at step {step}; partial artifacts kept");
            Ok(EXIT_DIVERGED)
        }
        None => Ok(EXIT_OK),
    }
}

fn print_suite(r: &SuiteReport) {
    println!(
        "{:<18} {}  {}/{} trials pass (need {})  max {:.3e}  min {:.3e}  [{}]",
        r.name,
        if r.passed() { "PASS" } else { "FAIL" },
        r.passing,
        r.trials,
        r.required,
        r.max_deviation,
        r.min_deviation,
        r.bound
    );
    if !r.passed() {
        if let Some(f) = &r.failure {
            println!("  offending trial: {f}");
        }
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    if a.trials == 0 {
        return Err(Error::Config("--trials must be positive".into()));
    }
    let dims = VerifyDims {
        d: a.d,
        n_head: a.heads,
        n: a.n,
    };
    println!(
        "verify: seed {}, {} trials, d={}, heads={}, n={}",
        a.seed, a.trials, a.d, a.heads, a.n
    );
    let reports = [
        reparametrization_suite(a.seed, a.trials, dims)?,
        absorption_suite(a.seed, a.trials, dims)?,
        symmetry_suite(a.seed, a.trials, dims)?,
        escape_suite(a.seed, a.trials, dims)?,
    ];
    for r in &reports {
        print_suite(r);
    }
    println!(
        "reparametrization trial 0 (theta = I) deviation: {:e}",
        reports[0].deviations[0]
    );
    let absorbed_ok = reports[1].failure.is_none();
    println!(
        "absorbed W_Q: {}",
        if absorbed_ok {
            format!("exactly I_{} in all {} trials", a.d, a.trials)
        } else {
            "not an exact identity in some trial".into()
        }
    );
    let ok = reports.iter().all(SuiteReport::passed);
    println!("verify: {}", if ok { "all bounds hold" } else { "FAILED" });
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
}

fn print_groups(label: &str, report: &GradCheckReport, tol: f64) -> bool {
    let ok = report.max_rel_error() <= tol;
    println!(
        "{label}: max rel err {:.3e} (<= {tol:e}) {}",
        report.max_rel_error(),
        if ok { "PASS" } else { "FAIL" }
    );
    for g in &report.groups {
        println!("  {:<28} {:>4} coords  {:.3e}", g.name, g.checked, g.max_rel_error);
    }
    if !ok {
        if let Some(w) = report.worst() {
            println!(
                "  worst: {} [{}] analytic {:.12e} numeric {:.12e}",
                w.name, w.worst_index, w.analytic, w.numeric
            );
        }
    }
    ok
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let opts = GradCheckOptions {
        eps: a.eps,
        max_coords: a.coords.max(1),
    };
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Error::Config("--eps must be positive".into()));
    }
    let mut ok = true;
    println!("primitives (<= {PRIMITIVE_TOL:e})");
    for (name, r) in primitive_suite(a.seed)? {
        let pass = r.max_rel_error() <= PRIMITIVE_TOL;
        ok &= pass;
        println!(
            "  {name:<18} {:.3e} {}",
            r.max_rel_error(),
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            if let Some(w) = r.worst() {
                println!(
                    "    worst: {} [{}] analytic {:.12e} numeric {:.12e}",
                    w.name, w.worst_index, w.analytic, w.numeric
                );
            }
        }
    }
    ok &= print_groups("linear micro-model", &linear_micro_check(a.seed)?, LINEAR_TOL);
    for mode in QueryMode::ALL {
        let cfg = ModelConfig {
            n_layer: a.layers,
            n_head: a.heads,
            d_model: a.d,
            context_len: a.n,
            vocab_size: a.vocab,
            ..gradcheck_config(mode)
        };
        let r = grad_check_model(&cfg, a.seed, opts)?;
        ok &= print_groups(&format!("model {mode}"), &r, MODEL_GRAD_TOL);
    }
    println!("gradcheck: {}", if ok { "all within thresholds" } else { "FAILED" });
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
}

/// Closed-form non-embedding counts of the full-size configs.
pub fn expected_non_embedding(v: ReferenceVariant) -> u64 {
    match v {
        ReferenceVariant::Baseline => 84_953_856,
        ReferenceVariant::ResidualGelu => 84_972_288,
        ReferenceVariant::Mlp475 => 95_570_688,
        ReferenceVariant::Identity => 77_875_968,
    }
}

fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn print_counts(label: &str, cfg: &ModelConfig) -> Result<u64> {
    let c = count_params(cfg)?;
    println!("{label}");
    println!("  total            {:>14}", group_digits(c.total));
    println!("  embedding        {:>14}", group_digits(c.embedding));
    println!("  non-embedding    {:>14}", group_digits(c.non_embedding));
    for (name, n) in &c.components {
        println!("    {name:<14} {:>14}", group_digits(*n));
    }
    Ok(c.non_embedding)
}

fn cmd_params(a: &ParamsArgs) -> Result<i32> {
    if let Some(p) = &a.reference {
        let variants: Vec<ReferenceVariant> = if p == "all" {
            ReferenceVariant::ALL.to_vec()
        } else {
            vec![p.parse()?]
        };
        let base = count_params(&ModelConfig::reference(ReferenceVariant::Baseline))?.non_embedding;
        let mut ok = true;
        for v in variants {
            let cfg = ModelConfig::reference(v);
            let got = print_counts(
                &format!(
                    "{v} (12 layers, d=768, mlp x{}, {} queries)",
                    cfg.mlp_mult, cfg.query_mode
                ),
                &cfg,
            )?;
            let want = expected_non_embedding(v);
            ok &= got == want;
            println!(
                "  expected         {:>14} {}",
                group_digits(want),
                if got == want { "(match)" } else { "(MISMATCH)" }
            );
            println!("  vs baseline      {:+.2}%", (got as f64 / base as f64 - 1.0) * 100.0);
        }
        let f = ftheta_param_count(768)?;
        println!(
            "query bottleneck at d=768: {} params = d^2 + 2d; overhead over d^2: {:.3}%",
            group_digits(f),
            (f - 768 * 768) as f64 / (768.0 * 768.0) * 100.0
        );
        return Ok(if ok { EXIT_OK } else { EXIT_VERIFY });
    }
    let base = RunSpec::default().apply(&read_config(a.config.as_deref())?)?.model;
    let cfg = ModelConfig::from_kv_over(&base, &overrides_map(&a.model.pairs(), &[])?)?;
    print_counts(
        &format!(
            "config ({} layers, d={}, {} queries)",
            cfg.n_layer, cfg.d_model, cfg.query_mode
        ),
        &cfg,
    )?;
    Ok(EXIT_OK)
}

fn run_id_for(path: &Path) -> String {
    let parent = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned());
    match (path.file_name().and_then(|n| n.to_str()), parent) {
        (Some(run::METRICS_FILE), Some(p)) => p,
        _ => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    }
}

fn cmd_compare(a: &CompareArgs) -> Result<i32> {
    let mut runs = Vec::new();
    for item in &a.runs {
        let (id, path) = match item.split_once('=') {
            Some((id, p)) => (id.to_string(), PathBuf::from(p)),
            None => (run_id_for(Path::new(item)), PathBuf::from(item)),
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        runs.push((id, MetricsLog::parse_csv(&text)?));
    }
    let table = compare_runs(&runs, &a.baseline)?;
    let dir = out_dir(a.out.as_deref());
    let csv_path = dir.join(format!("{}.csv", a.name));
    let svg_path = dir.join(format!("{}.svg", a.name));
    write_atomic(&csv_path, table.to_csv().as_bytes())?;
    let series: Vec<Series> = table
        .runs
        .iter()
        .map(|r| Series {
            name: r.clone(),
            points: table
                .series(r)
                .into_iter()
                .map(|(s, v)| (s as f64, v * 100.0))
                .collect(),
        })
        .collect();
    let chart = line_chart(
        &format!("Relative improvement over {}", table.baseline),
        "step",
        "relative improvement (%)",
        &series,
    );
    write_atomic(&svg_path, chart.as_bytes())?;
    println!(
        "relative improvement over '{}' at step {}",
        table.baseline,
        table.steps.last().copied().unwrap_or(0)
    );
    for s in &series {
        let last = s.points.last().map_or(f64::NAN, |p| p.1);
        let ys: Vec<f64> = s.points.iter().map(|p| p.1).collect();
        println!("  {:<20} {:+8.3}%  [{}]", s.name, last, sparkline(&ys, 40));
    }
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(EXIT_OK)
}

fn cmd_corpus(a: &CorpusArgs) -> Result<i32> {
    if a.bytes == 0 {
        return Err(Error::Config("--bytes must be positive".into()));
    }
    let text = synthetic_corpus(a.bytes, a.seed);
    write_atomic(&a.out, &text)?;
    let toks: Vec<usize> = text.iter().map(|&b| b as usize).collect();
    println!(
        "wrote {} bytes to {}; byte unigram entropy {:.6} nats",
        text.len(),
        a.out.display(),
        unigram_entropy(&toks)
    );
    Ok(EXIT_OK)
}
