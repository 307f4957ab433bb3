use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{decode, encode};
use super::*;
use crate::attention::QueryMode;
use crate::numerics::GradCheckOptions;

const D: u64 = 768;
const L: u64 = 12;

fn tiny(mode: QueryMode) -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 8,
        context_len: 6,
        vocab_size: 13,
        ..ModelConfig::toy(mode)
    }
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn reference_counts() {
    let base = count_params(&ModelConfig::reference(ReferenceVariant::Baseline)).unwrap();
    assert_eq!(base.non_embedding, 84_953_856);
    assert_eq!(base.non_embedding, 144 * D * D + 24 * D + D);
    let rg = count_params(&ModelConfig::reference(ReferenceVariant::ResidualGelu)).unwrap();
    assert_eq!(rg.non_embedding, 84_972_288);
    let wide = count_params(&ModelConfig::reference(ReferenceVariant::Mlp475)).unwrap();
    assert_eq!(wide.non_embedding, 95_570_688);
    let ratio = wide.non_embedding as f64 / base.non_embedding as f64 - 1.0;
    assert!((ratio * 100.0 - 12.5).abs() <= 0.05, "{ratio}");
    let id = count_params(&ModelConfig::reference(ReferenceVariant::Identity)).unwrap();
    assert_eq!(id.non_embedding, 77_875_968);
}

#[test]
fn count_breakdown_is_consistent() {
    let cfg = ModelConfig::reference(ReferenceVariant::Baseline);
    let c = count_params(&cfg).unwrap();
    assert_eq!(c.embedding, (50304 + 1024) * D);
    assert_eq!(c.total, c.embedding + c.non_embedding);
    assert_eq!(c.components.iter().map(|(_, n)| n).sum::<u64>(), c.total);
    assert_eq!(c.component("attn.query"), L * D * D);
    assert_eq!(c.component("attn.kv"), 2 * L * D * D);
    assert_eq!(c.component("mlp"), 8 * L * D * D);
    assert_eq!(c.component("norm"), (2 * L + 1) * D);
    let p: TransformerParams<Tensor<f32>> = init_params(&tiny(QueryMode::ResidualGelu), 0).unwrap();
    assert_eq!(numel(&p), count_params(&tiny(QueryMode::ResidualGelu)).unwrap().total);
}

#[test]
fn count_mode_relations() {
    let at = |m| {
        count_params(&ModelConfig {
            query_mode: m,
            ..ModelConfig::reference(ReferenceVariant::Baseline)
        })
        .unwrap()
        .non_embedding
    };
    let f = crate::attention::ftheta_param_count(D).unwrap();
    assert_eq!(at(QueryMode::ResidualGelu) - at(QueryMode::Identity), f * L);
    assert_eq!(at(QueryMode::Linear), at(QueryMode::ResidualGelu) - 2 * D * L);
}

#[test]
fn relative_improvement_table_values() {
    let a = relative_improvement(2.956, 2.915).unwrap();
    assert!((a - 0.013_870_094_722_598_08).abs() < 1e-15);
    assert!((a * 100.0 - 1.40).abs() <= 0.06);
    let b = relative_improvement(2.956, 2.927).unwrap();
    assert!((b - 0.009_810_554_803_788_875).abs() < 1e-15);
    assert!((b * 100.0 - 0.98).abs() <= 0.03);
    assert_eq!(relative_improvement(3.1, 3.1).unwrap(), 0.0);
    assert!(relative_improvement(0.0, 1.0).is_err());
    assert!(relative_improvement(-1.0, 1.0).is_err());
}

#[test]
fn init_is_seeded_and_gains_are_one() {
    let cfg = tiny(QueryMode::ResidualGelu);
    let a: TransformerParams<Tensor<f32>> = init_params(&cfg, 7).unwrap();
    let b = init_params(&cfg, 7).unwrap();
    let c = init_params(&cfg, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let spec = layout(&cfg);
    for ((name, s), t) in spec.names().iter().zip(spec.values()).zip(a.values()) {
        assert_eq!(t.shape(), &s.shape[..], "{name}");
        if s.kind == ParamKind::Gain {
            assert!(t.data().iter().all(|&g| g == 1.0), "{name}");
        }
    }
}

#[test]
fn init_statistics_at_width_768() {
    let cfg = ModelConfig {
        n_layer: 1,
        n_head: 12,
        d_model: 768,
        context_len: 8,
        vocab_size: 16,
        ..ModelConfig::toy(QueryMode::Linear)
    };
    let p: TransformerParams<Tensor<f64>> = init_params(&cfg, 3).unwrap();
    let w = &p.blocks[0].attn.w_k;
    let n = w.numel() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let std = (w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    // Standard errors: 0.02/√n for the mean, 0.02/√(2n) for the std.
    assert!(mean.abs() <= 3.0 * 0.02 / n.sqrt(), "mean {mean}");
    assert!((std - 0.02).abs() <= 3.0 * 0.02 / (2.0 * n).sqrt(), "std {std}");
    let w_o = &p.blocks[0].attn.w_o;
    let s = (w_o.sum_sq() / n).sqrt();
    assert!((s - 0.02 / 2f64.sqrt()).abs() < 1e-3, "residual std {s}");
}

#[test]
fn init_loss_is_near_uniform() {
    let cfg = ModelConfig::toy(QueryMode::Linear);
    let p: TransformerParams<Tensor<f32>> = init_params(&cfg, 1).unwrap();
    let toks = random_tokens(2 * 33, cfg.vocab_size, 2);
    let (inputs, targets): (Vec<_>, Vec<_>) = toks.chunks(33).flat_map(|c| c[..32].iter().zip(&c[1..])).unzip();
    let (loss, _) = loss_and_grads(&p, &inputs, &targets, 2, &cfg).unwrap();
    let ln_v = (cfg.vocab_size as f64).ln();
    assert!((loss - ln_v).abs() <= 0.1 * ln_v, "loss {loss} vs ln V {ln_v}");
}

#[test]
fn forward_is_deterministic_and_shaped() {
    for mode in QueryMode::ALL {
        let cfg = tiny(mode);
        let p: TransformerParams<Tensor<f32>> = init_params(&cfg, 4).unwrap();
        let toks = random_tokens(5, cfg.vocab_size, 5);
        let a = forward(&p, &toks, &cfg).unwrap();
        let b = forward(&p, &toks, &cfg).unwrap();
        assert_eq!(a.shape(), &[5, cfg.vocab_size]);
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn forward_rejects_bad_input() {
    let cfg = tiny(QueryMode::Linear);
    let p: TransformerParams<Tensor<f32>> = init_params(&cfg, 4).unwrap();
    assert!(forward(&p, &[0; 7], &cfg).is_err());
    assert!(forward(&p, &[13], &cfg).is_err());
    assert!(forward(&p, &[], &cfg).is_err());
    assert!(forward_batch(&p, &[0; 5], 2, &cfg).is_err());
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    for mode in QueryMode::ALL {
        let cfg = tiny(mode);
        let p: TransformerParams<Tensor<f64>> = init_params(&cfg, 9).unwrap();
        let mut toks = random_tokens(6, cfg.vocab_size, 10);
        let a = forward(&p, &toks, &cfg).unwrap();
        toks[4] = (toks[4] + 1) % cfg.vocab_size;
        let b = forward(&p, &toks, &cfg).unwrap();
        assert_eq!(&a.data()[..4 * cfg.vocab_size], &b.data()[..4 * cfg.vocab_size]);
        assert_ne!(a.row(4), b.row(4));
    }
}

#[test]
fn sequence_loss_ignores_batch_mates() {
    let cfg = tiny(QueryMode::ResidualGelu);
    let p: TransformerParams<Tensor<f32>> = init_params(&cfg, 11).unwrap();
    let inputs = random_tokens(12, cfg.vocab_size, 12);
    let targets = random_tokens(12, cfg.vocab_size, 13);
    let both = sequence_losses(&p, &inputs, &targets, 2, &cfg).unwrap();
    let second = sequence_losses(&p, &inputs[6..], &targets[6..], 1, &cfg).unwrap();
    assert_eq!(both[1], second[0]);
    let (loss, _) = loss_and_grads(&p, &inputs, &targets, 2, &cfg).unwrap();
    assert!((loss - (both[0] + both[1]) / 2.0).abs() < 1e-5);
}

#[test]
fn grads_match_layout() {
    let cfg = tiny(QueryMode::ResidualGelu);
    let p: TransformerParams<Tensor<f32>> = init_params(&cfg, 1).unwrap();
    let toks = random_tokens(6, cfg.vocab_size, 2);
    let (_, g) = loss_and_grads(&p, &toks, &toks, 1, &cfg).unwrap();
    assert_eq!(g.names(), p.names());
    for (a, b) in g.values().iter().zip(p.values()) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.is_finite());
    }
}

#[test]
fn full_model_gradients() {
    for mode in QueryMode::ALL {
        let cfg = gradcheck_config(mode);
        let report = grad_check_model(&cfg, 17, GradCheckOptions::default()).unwrap();
        assert_eq!(report.groups.len(), layout(&cfg).names().len());
        let worst = report.worst().unwrap();
        eprintln!("{mode}: worst {} at {:.2e}", worst.name, worst.max_rel_error);
        assert!(report.max_rel_error() <= MODEL_GRAD_TOL, "{mode}: {worst:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for mode in QueryMode::ALL {
        let cfg = tiny(mode);
        let p: TransformerParams<Tensor<f32>> = init_params(&cfg, 21).unwrap();
        let bytes = encode(&cfg, &p).unwrap();
        assert_eq!(&bytes[..4], b"RQCK");
        let (cfg2, p2) = decode::<f32>(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(encode(&cfg2, &p2).unwrap(), bytes);
        for (a, b) in p.values().iter().zip(p2.values()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let cfg = tiny(QueryMode::Linear);
    let p: TransformerParams<Tensor<f32>> = init_params(&cfg, 21).unwrap();
    let bytes = encode(&cfg, &p).unwrap();
    assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode::<f64>(&bytes).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode::<f32>(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode::<f32>(&magic).is_err());
    let mut version = bytes;
    version[4] = 9;
    assert!(decode::<f32>(&version).is_err());
}

#[test]
fn config_text_round_trip() {
    for v in ReferenceVariant::ALL {
        let cfg = ModelConfig::reference(v);
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
    let bad = crate::kv::KvMap::parse("d_model = 10\nn_head = 4").unwrap();
    assert!(ModelConfig::from_kv(&bad).is_err());
    let unknown = crate::kv::KvMap::parse("depth = 3").unwrap();
    assert!(ModelConfig::from_kv(&unknown).is_err());
}

#[test]
fn greedy_generation_extends_prompt() {
    let cfg = tiny(QueryMode::Identity);
    let p: TransformerParams<Tensor<f32>> = init_params(&cfg, 2).unwrap();
    let out = greedy_generate(&p, &[1, 2], 8, &cfg).unwrap();
    assert_eq!(out.len(), 10);
    assert_eq!(&out[..2], &[1, 2]);
    assert!(out.iter().all(|&t| t < cfg.vocab_size));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_round_trip_any_values(seed in any::<u64>(), mode_ix in 0usize..3, specials in any::<bool>()) {
        let cfg = tiny(QueryMode::ALL[mode_ix]);
        let mut p: TransformerParams<Tensor<f64>> = init_params(&cfg, seed).unwrap();
        if specials {
            p.tok_emb.data_mut()[0] = f64::NAN;
            p.tok_emb.data_mut()[1] = -0.0;
            p.tok_emb.data_mut()[2] = f64::INFINITY;
            p.tok_emb.data_mut()[3] = f64::MIN_POSITIVE / 4.0;
        }
        let bytes = encode(&cfg, &p).unwrap();
        let (_, p2) = decode::<f64>(&bytes).unwrap();
        for (a, b) in p.values().iter().zip(p2.values()) {
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }
}
