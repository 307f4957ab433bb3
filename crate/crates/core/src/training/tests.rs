use proptest::prelude::*;

use super::data::DEFAULT_CORPUS_BYTES;
use super::metrics::{DIVERGENCE_FACTOR, DIVERGENCE_WINDOW};
use super::plan::gather;
use super::*;
use crate::attention::QueryMode;
use crate::model::{checkpoint, init_params, ModelConfig};
use crate::numerics::{AdamWConfig, AdamWState, Tensor};

#[test]
fn byte_tokens_and_round_trip() {
    let (toks, tok) = tokenize_corpus(b"ab", TokenizerKind::Bytes).unwrap();
    assert_eq!(toks, vec![97, 98]);
    assert_eq!(tok.vocab_size(), 256);
    let s = "héllo, wörld\n".as_bytes();
    for kind in [TokenizerKind::Bytes, TokenizerKind::Chars] {
        let (toks, tok) = tokenize_corpus(s, kind).unwrap();
        assert_eq!(tok.decode(&toks).unwrap(), s);
    }
    assert!(tokenize_corpus(b"", TokenizerKind::Bytes).is_err());
}

#[test]
fn char_vocabulary() {
    let (toks, tok) = tokenize_corpus("banana".as_bytes(), TokenizerKind::Chars).unwrap();
    assert_eq!(tok.vocab_size(), 3);
    assert_eq!(toks, vec![1, 0, 2, 0, 2, 0]);
    assert!(tok.encode(b"bad").is_err());
    assert!(tok.decode(&[3]).is_err());
    assert!(tokenize_corpus(&[0xff, 0xfe], TokenizerKind::Chars).is_err());
    assert!(Tokenizer::Bytes.decode(&[256]).is_err());
}

#[test]
fn split_by_fraction() {
    let toks: Vec<usize> = (0..1000).collect();
    let (a, b) = split(&toks, 0.9).unwrap();
    assert_eq!((a.len(), b.len()), (900, 100));
    assert_eq!(b[0], 900);
    assert!(split(&toks, 1.5).is_err());
}

#[test]
fn unigram_entropy_values() {
    assert!((unigram_entropy(&[0, 1, 2, 3]) - 4f64.ln()).abs() < 1e-15);
    assert_eq!(unigram_entropy(&[5, 5, 5]), 0.0);
    // −¾ln¾ − ¼ln¼ (mpmath, 30 digits)
    assert!((unigram_entropy(&[1, 1, 1, 2]) - 0.562_335_144_618_808_4).abs() < 1e-15);
}

#[test]
fn synthetic_corpus_is_deterministic_text() {
    let a = synthetic_corpus(20_000, 1);
    assert_eq!(a.len(), 20_000);
    assert_eq!(a, synthetic_corpus(20_000, 1));
    assert_ne!(a, synthetic_corpus(20_000, 2));
    assert!(a.iter().all(|&b| b == b'\n' || (0x20..0x7f).contains(&b)));
    let h = unigram_entropy(&a.iter().map(|&b| b as usize).collect::<Vec<_>>());
    assert!((2.5..3.5).contains(&h), "{h}");
}

#[test]
fn default_corpus_entropy_matches_reference() {
    // Byte entropy of the default 1 MB corpus, recomputed from byte counts at 30 digits.
    let text = synthetic_corpus(DEFAULT_CORPUS_BYTES, 0);
    let h = unigram_entropy(&text.iter().map(|&b| b as usize).collect::<Vec<_>>());
    assert!((h - 2.978_539_036_114_438_6).abs() < 1e-12, "{h}");
}

fn cfg(steps: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        warmup_steps: steps / 10,
        batch_size: batch,
        eval_interval: 5,
        eval_sequences: 6,
        ..TrainConfig::default()
    }
}

#[test]
fn plan_is_reproducible_and_bounded() {
    let c = cfg(50, 4);
    let a = plan_batches(9, 5000, 600, 32, &c).unwrap();
    let b = plan_batches(9, 5000, 600, 32, &c).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), plan_batches(10, 5000, 600, 32, &c).unwrap().to_bytes());
    assert_eq!(a.train_offsets.len(), 200);
    assert_eq!(a.step_offsets(2), &a.train_offsets[4..8]);
    let longer = plan_batches(9, 5000, 600, 32, &cfg(80, 4)).unwrap();
    assert_eq!(longer.val_offsets, a.val_offsets);
    assert_eq!(&longer.train_offsets[..200], &a.train_offsets[..]);
    assert!(plan_batches(9, 32, 600, 32, &c).is_err());
    assert!(plan_batches(9, 5000, 20, 32, &c).is_err());
}

#[test]
fn plan_offsets_stay_in_bounds_over_10k_draws() {
    let c = cfg(2500, 4);
    let plan = plan_batches(3, 140, 130, 128, &c).unwrap();
    assert_eq!(plan.train_offsets.len(), 10_000);
    assert!(plan.train_offsets.iter().all(|&o| o + 128 < 140));
    assert!(plan.val_offsets.iter().all(|&o| o + 128 < 130));
    // All 12 valid starts are hit.
    let mut seen = [false; 12];
    plan.train_offsets.iter().for_each(|&o| seen[o] = true);
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn gather_shifts_targets() {
    let toks: Vec<usize> = (10..30).collect();
    let (i, t) = gather(&toks, &[0, 5], 3);
    assert_eq!(i, vec![10, 11, 12, 15, 16, 17]);
    assert_eq!(t, vec![11, 12, 13, 16, 17, 18]);
    assert_ne!(batch_hash(&i, &t), batch_hash(&t, &i));
}

#[test]
fn schedule_landmarks() {
    let c = TrainConfig {
        max_lr: 1e-3,
        min_lr: 1e-4,
        warmup_steps: 100,
        total_steps: 2100,
        ..TrainConfig::default()
    };
    assert_eq!(lr_schedule(0, &c), 0.0);
    assert_eq!(lr_schedule(50, &c), 5e-4);
    assert_eq!(lr_schedule(100, &c), 1e-3);
    assert!((lr_schedule(2100, &c) - 1e-4).abs() < 1e-18);
    assert!((lr_schedule(1100, &c) - 5.5e-4).abs() < 1e-15);
}

proptest! {
    #[test]
    fn schedule_continuous_and_monotone(w in 1usize..500, extra in 1usize..5000, max in 1e-5f64..1e-1, frac in 0.0f64..1.0) {
        let c = TrainConfig { max_lr: max, min_lr: max * frac, warmup_steps: w, total_steps: w + extra, ..TrainConfig::default() };
        let before = lr_schedule(w - 1, &c);
        prop_assert!((lr_schedule(w, &c) - before).abs() <= max / w as f64 + 1e-15);
        let mut prev = lr_schedule(w, &c);
        for s in w + 1..=w + extra {
            let lr = lr_schedule(s, &c);
            prop_assert!(lr <= prev + 1e-18);
            prev = lr;
        }
        prop_assert!((prev - c.min_lr).abs() <= 1e-12 * max);
    }

    #[test]
    fn metrics_csv_round_trip(rows in prop::collection::vec((any::<f32>(), any::<f32>(), any::<f32>(), any::<bool>(), prop::option::of(any::<f32>())), 0..40)) {
        let mut log = MetricsLog::new();
        for (i, (loss, lr, g, d, v)) in rows.into_iter().enumerate() {
            log.push_train(TrainRecord { step: i + 1, loss, lr, grad_norm: g, diverged: d }).unwrap();
            if let Some(v) = v {
                log.push_val(EvalRecord { step: i + 1, val_loss: v }).unwrap();
            }
        }
        let text = log.to_csv();
        let back = MetricsLog::parse_csv(&text).unwrap();
        prop_assert!(back.bit_eq(&log));
        prop_assert_eq!(back.to_csv(), text);
    }
}

#[test]
fn metrics_csv_layout_and_errors() {
    let mut log = MetricsLog::new();
    log.push_train(TrainRecord {
        step: 1,
        loss: 2.5,
        lr: 1e-3,
        grad_norm: 0.75,
        diverged: false,
    })
    .unwrap();
    log.push_val(EvalRecord {
        step: 1,
        val_loss: 2.25,
    })
    .unwrap();
    assert_eq!(
        log.to_csv(),
        "step,kind,loss,lr,grad_norm,diverged\n1,train,2.50000000e0,1.00000005e-3,7.50000000e-1,0\n1,val,2.25000000e0,,,\n"
    );
    assert!(log
        .push_train(TrainRecord {
            step: 1,
            loss: 0.0,
            lr: 0.0,
            grad_norm: 0.0,
            diverged: false
        })
        .is_err());
    assert!(MetricsLog::parse_csv("step,loss\n").is_err());
    assert!(MetricsLog::parse_csv("step,kind,loss,lr,grad_norm,diverged\n1,test,1,1,1,0\n").is_err());
    assert!(MetricsLog::parse_csv("step,kind,loss,lr,grad_norm,diverged\n1,val,1,2,,\n").is_err());
    assert!(MetricsLog::parse_csv("step,kind,loss,lr,grad_norm,diverged\n2,train,1,1,1,0\n1,train,1,1,1,0\n").is_err());
}

fn log_of(losses: &[f32]) -> MetricsLog {
    let mut log = MetricsLog::new();
    for (i, &l) in losses.iter().enumerate() {
        log.push_train(TrainRecord {
            step: i + 1,
            loss: l,
            lr: 0.0,
            grad_norm: 1.0,
            diverged: false,
        })
        .unwrap();
    }
    log
}

#[test]
fn divergence_rule() {
    let decreasing: Vec<f32> = (0..500).map(|i| 5.0 - i as f32 * 0.005).collect();
    assert_eq!(detect_divergence(&log_of(&decreasing)), None);

    let mut nan = decreasing.clone();
    nan[41] = f32::NAN;
    assert_eq!(detect_divergence(&log_of(&nan)), Some(42));

    let blow = (DIVERGENCE_FACTOR as f32) * 5.0 + 1.0;
    let mut sustained = decreasing.clone();
    sustained[200..200 + DIVERGENCE_WINDOW]
        .iter_mut()
        .for_each(|l| *l = blow);
    assert_eq!(detect_divergence(&log_of(&sustained)), Some(201));

    let mut brief = decreasing.clone();
    brief[200..200 + DIVERGENCE_WINDOW - 1]
        .iter_mut()
        .for_each(|l| *l = blow);
    assert_eq!(detect_divergence(&log_of(&brief)), None);

    let mut two = decreasing;
    two[100..150].iter_mut().for_each(|l| *l = blow);
    two[300..300 + DIVERGENCE_WINDOW + 20]
        .iter_mut()
        .for_each(|l| *l = blow);
    assert_eq!(detect_divergence(&log_of(&two)), Some(301));
    assert_eq!(detect_divergence(&MetricsLog::new()), None);
}

fn val_log(vals: &[(usize, f32)]) -> MetricsLog {
    let mut log = MetricsLog::new();
    for &(step, v) in vals {
        log.push_val(EvalRecord { step, val_loss: v }).unwrap();
    }
    log
}

#[test]
fn compare_against_baseline() {
    let base = val_log(&[(1000, 4.0), (2000, 3.0)]);
    let var = val_log(&[(1000, 3.0), (2000, 2.25)]);
    let runs = vec![("base".to_string(), base.clone()), ("var".to_string(), var)];
    let c = compare_runs(&runs, "base").unwrap();
    assert_eq!(c.series("base"), vec![(1000, 0.0), (2000, 0.0)]);
    assert_eq!(c.series("var"), vec![(1000, 0.25), (2000, 0.25)]);
    assert!(c
        .to_csv()
        .starts_with("step,run,val_loss,baseline_loss,rel_improvement\n1000,base,"));

    let mut bad = runs.clone();
    bad.push(("short".into(), val_log(&[(1000, 3.0)])));
    assert!(compare_runs(&bad, "base").is_err());
    assert!(compare_runs(&runs, "missing").is_err());
    assert!(compare_runs(&[("b".into(), MetricsLog::new())], "b").is_err());
}

#[test]
fn compare_reproduces_table_endpoints() {
    let runs = vec![
        ("baseline".to_string(), val_log(&[(59_000, 2.956)])),
        ("residual-gelu".to_string(), val_log(&[(59_000, 2.915)])),
        ("mlp475".to_string(), val_log(&[(59_000, 2.927)])),
    ];
    let c = compare_runs(&runs, "baseline").unwrap();
    let rg = c.series("residual-gelu")[0].1 * 100.0;
    let wide = c.series("mlp475")[0].1 * 100.0;
    assert!((rg - 1.40).abs() <= 0.06, "{rg}");
    assert!((wide - 0.98).abs() <= 0.03, "{wide}");
}

#[test]
fn adamw_without_decay_is_adam() {
    let (b1, b2, eps, lr) = (0.9f64, 0.95f64, 1e-8f64, 0.05f64);
    let mut opt = AdamWState::<f64>::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        [(&[1usize][..], true)],
    );
    let mut x = Tensor::<f64>::full([1], 1.5);
    let (mut xr, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    for t in 1..=40 {
        // f(x) = x²/2 + sin x
        let g = xr + xr.sin();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        xr -= lr * mh / (vh.sqrt() + eps);

        let gx = x.data()[0] + x.data()[0].sin();
        opt.step(&mut [&mut x], &[Tensor::full([1], gx)], lr, 1e9).unwrap();
        assert!((x.data()[0] - xr).abs() <= 1e-14, "step {t}");
    }
}

struct Fixture {
    model: ModelConfig,
    train: Vec<usize>,
    val: Vec<usize>,
}

fn fixture(mode: QueryMode) -> Fixture {
    let text = synthetic_corpus(30_000, 5);
    let (toks, _) = tokenize_corpus(&text, TokenizerKind::Bytes).unwrap();
    let (tr, va) = split(&toks, 0.9).unwrap();
    Fixture {
        model: ModelConfig {
            n_layer: 2,
            n_head: 2,
            d_model: 16,
            context_len: 16,
            ..ModelConfig::toy(mode)
        },
        train: tr.to_vec(),
        val: va.to_vec(),
    }
}

fn run(f: &Fixture, c: &TrainConfig) -> TrainOutcome {
    let plan = plan_batches(c.seed, f.train.len(), f.val.len(), f.model.context_len, c).unwrap();
    train(&f.model, c, &plan, &f.train, &f.val, |_, _| {}).unwrap()
}

#[test]
fn zero_steps_returns_init() {
    let f = fixture(QueryMode::Linear);
    let c = cfg(0, 2);
    let out = run(&f, &c);
    assert!(out.log.is_empty());
    assert_eq!(out.params, init_params::<f32>(&f.model, c.seed).unwrap());
}

#[test]
fn short_runs_are_bitwise_reproducible() {
    let f = fixture(QueryMode::ResidualGelu);
    let c = TrainConfig {
        max_lr: 3e-3,
        ..cfg(30, 4)
    };
    let a = run(&f, &c);
    let b = run(&f, &c);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(
        checkpoint::encode(&f.model, &a.params).unwrap(),
        checkpoint::encode(&f.model, &b.params).unwrap()
    );
    assert_eq!(a.log.eval_steps(), vec![5, 10, 15, 20, 25, 30]);
    let first = a.log.train[0].loss as f64;
    assert!(a.log.tail_train_loss(5).unwrap() < first, "{:?}", a.log.train.last());
}

#[test]
fn batches_are_shared_across_query_modes() {
    let c = cfg(6, 3);
    let hashes: Vec<Vec<u64>> = QueryMode::ALL
        .iter()
        .map(|&m| run(&fixture(m), &c).batch_hashes)
        .collect();
    assert_eq!(hashes[0].len(), 6);
    assert!(hashes.iter().all(|h| *h == hashes[0]));
}

#[test]
fn accumulation_matches_a_single_batch() {
    let f = fixture(QueryMode::Linear);
    let one = run(
        &f,
        &TrainConfig {
            grad_accum: 1,
            ..cfg(3, 4)
        },
    );
    let two = run(
        &f,
        &TrainConfig {
            grad_accum: 2,
            ..cfg(3, 2)
        },
    );
    for (a, b) in one.log.train.iter().zip(&two.log.train) {
        assert!((a.loss - b.loss).abs() < 1e-5, "{a:?} {b:?}");
        assert!((a.grad_norm - b.grad_norm).abs() < 1e-4 * a.grad_norm, "{a:?} {b:?}");
    }
}

#[test]
fn validation_is_order_invariant() {
    let f = fixture(QueryMode::Identity);
    let p = init_params::<f32>(&f.model, 4).unwrap();
    let offs = vec![0, 7, 100, 2000, 31, 2500];
    let mut rev = offs.clone();
    rev.reverse();
    let a = evaluate(&p, &f.model, &f.val, &offs, 16, 4).unwrap();
    let b = evaluate(&p, &f.model, &f.val, &rev, 16, 3).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn huge_learning_rate_is_flagged() {
    let f = fixture(QueryMode::Linear);
    let c = TrainConfig {
        max_lr: 50.0,
        min_lr: 50.0,
        grad_clip: 1e9,
        weight_decay: 0.0,
        ..cfg(400, 2)
    };
    let out = run(&f, &c);
    let at = out.diverged_at.expect("run should diverge");
    assert_eq!(detect_divergence(&out.log), Some(at));
    assert!(out.log.diverged());
    assert!(out.log.train.len() < 400);
}

#[test]
fn config_validation() {
    assert!(TrainConfig {
        warmup_steps: 10,
        total_steps: 10,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        warmup_steps: 10,
        total_steps: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_ok());
    assert!(TrainConfig {
        min_lr: 1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    let c = TrainConfig::default();
    assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
}
