use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::reparam::*;
use super::verify::{random_theta, random_weights};
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Scalar recomputation of `(x + LN(GELU(RMSNorm(x)·W1)·W2)) / 2` for one row.
fn bottleneck_row_oracle(x: &[f64], b: &Bottleneck<Tensor<f64>>, eps: f64) -> Vec<f64> {
    let d = x.len();
    let r = d / 2;
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
    let xn: Vec<f64> = (0..d).map(|j| x[j] / rms * b.rms_gain.data()[j]).collect();
    let mut h = vec![0.0; r];
    for (c, hc) in h.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..d {
            s += xn[j] * b.w1.at(j, c);
        }
        *hc = gelu_tanh(s);
    }
    let mut z = vec![0.0; d];
    for (j, zj) in z.iter_mut().enumerate() {
        for c in 0..r {
            *zj += h[c] * b.w2.at(c, j);
        }
    }
    let mean = z.iter().sum::<f64>() / d as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    (0..d)
        .map(|j| 0.5 * (x[j] + (z[j] - mean) / (var + eps).sqrt() * b.ln_gain.data()[j]))
        .collect()
}

/// Per-head loop oracle for causal MHA.
fn mha_oracle(x: &Tensor<f64>, w: &AttentionWeights<Tensor<f64>>, cfg: &AttentionConfig) -> Tensor<f64> {
    let (n, d) = (x.rows(), x.cols());
    let dk = d / cfg.n_head;
    let q = query_project(x, w, cfg).unwrap();
    let proj = |m: &Tensor<f64>| {
        Tensor::from_fn([n, d], |idx| {
            let (i, j) = (idx / d, idx % d);
            (0..d).map(|p| x.at(i, p) * m.at(p, j)).sum::<f64>()
        })
    };
    let (k, v) = (proj(&w.w_k), proj(&w.w_v));
    let mut concat = Tensor::<f64>::zeros([n, d]);
    for h in 0..cfg.n_head {
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..dk).map(|c| q.at(i, h * dk + c) * k.at(j, h * dk + c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for c in 0..dk {
                let val: f64 = (0..=i).map(|j| (scores[j] - mx).exp() / z * v.at(j, h * dk + c)).sum();
                concat.set(i, h * dk + c, val);
            }
        }
    }
    Tensor::from_fn([n, d], |idx| {
        let (i, j) = (idx / d, idx % d);
        (0..d).map(|p| concat.at(i, p) * w.w_o.at(p, j)).sum::<f64>()
    })
}

#[test]
fn identity_mode_passes_input_through() {
    let mut r = rng(1);
    let w = random_weights(QueryMode::Identity, 8, &mut r);
    let x = Tensor::randn([5, 8], 1.0, &mut r);
    assert_eq!(query_project(&x, &w, &AttentionConfig::new(2)).unwrap(), x);
}

#[test]
fn zero_bottleneck_output_halves_input() {
    let mut r = rng(2);
    let mut w = random_weights(QueryMode::ResidualGelu, 8, &mut r);
    if let QueryWeights::ResidualGelu(b) = &mut w.query {
        b.w2 = Tensor::zeros([4, 8]);
        b.ln_gain = Tensor::randn([8], 3.0, &mut r);
    }
    let x = Tensor::randn([5, 8], 1.0, &mut r);
    let q = query_project(&x, &w, &AttentionConfig::new(2)).unwrap();
    assert_eq!(q, x.map(|v| v / 2.0));
}

#[test]
fn hand_set_bottleneck_matches_scalar_recomputation() {
    let b = Bottleneck {
        w1: Tensor::from_rows(&[&[0.5, -1.0], &[0.25, 0.75], &[-0.5, 0.1], &[1.0, 0.2]]),
        w2: Tensor::from_rows(&[&[0.3, -0.2, 0.9, -1.1], &[0.7, 0.4, -0.6, 0.05]]),
        rms_gain: Tensor::new([4], vec![1.0, 0.9, 1.1, 1.2]).unwrap(),
        ln_gain: Tensor::new([4], vec![0.8, 1.0, 1.3, 0.6]).unwrap(),
    };
    let w = AttentionWeights {
        query: QueryWeights::ResidualGelu(b.clone()),
        w_k: Tensor::eye(4),
        w_v: Tensor::eye(4),
        w_o: Tensor::eye(4),
    };
    let x = Tensor::from_rows(&[&[1.0, -2.0, 0.5, 3.0], &[-0.25, 0.0, 1.5, -1.0]]);
    let q = query_project(&x, &w, &AttentionConfig::new(2)).unwrap();
    for i in 0..2 {
        let want = bottleneck_row_oracle(x.row(i), &b, 1e-5);
        for j in 0..4 {
            assert!((q.at(i, j) - want[j]).abs() < 1e-12, "row {i} col {j}");
        }
    }
}

#[test]
fn width_mismatch_rejected() {
    let mut r = rng(3);
    let w = random_weights(QueryMode::Linear, 8, &mut r);
    let x = Tensor::<f64>::zeros([3, 6]);
    assert!(query_project(&x, &w, &AttentionConfig::new(2)).is_err());
    assert!(mha_forward(&x, &w, &CausalMask::new(3), &AttentionConfig::new(2)).is_err());
}

#[test]
fn bottleneck_param_count() {
    assert_eq!(ftheta_param_count(768).unwrap(), 591_360);
    assert_eq!(768 * 768, 589_824);
    assert_eq!(ftheta_param_count(2).unwrap(), 8);
    assert!(ftheta_param_count(7).is_err());
    // Gains add 2d on top of d², i.e. 2/d of the matrix count (0.26% at d = 768).
    let overhead = (ftheta_param_count(768).unwrap() - 768 * 768) as f64 / (768.0 * 768.0);
    assert_eq!(overhead, 2.0 / 768.0);
}

#[test]
fn single_token_attends_to_itself() {
    let mut r = rng(4);
    let w = random_weights(QueryMode::Linear, 8, &mut r);
    let x = Tensor::randn([1, 8], 1.0, &mut r);
    let out = mha_forward(&x, &w, &CausalMask::new(1), &AttentionConfig::new(2)).unwrap();
    let want = ops::matmul(&ops::matmul(&x, &w.w_v).unwrap(), &w.w_o).unwrap();
    assert!(out.max_abs_diff(&want).unwrap() < 1e-14);
}

#[test]
fn zero_keys_give_running_mean_of_values() {
    let mut r = rng(5);
    let mut w = random_weights(QueryMode::Linear, 8, &mut r);
    w.w_k = Tensor::zeros([8, 8]);
    let x = Tensor::randn([4, 8], 1.0, &mut r);
    let out = mha_forward(&x, &w, &CausalMask::new(4), &AttentionConfig::new(2)).unwrap();
    let v = ops::matmul(&x, &w.w_v).unwrap();
    let mut mean = Tensor::<f64>::zeros([4, 8]);
    for i in 0..4 {
        for j in 0..8 {
            mean.set(i, j, (0..=i).map(|t| v.at(t, j)).sum::<f64>() / (i + 1) as f64);
        }
    }
    let want = ops::matmul(&mean, &w.w_o).unwrap();
    assert!(out.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn mha_matches_naive_loop_in_every_mode() {
    for (i, mode) in QueryMode::ALL.into_iter().enumerate() {
        let mut r = rng(10 + i as u64);
        let w = random_weights(mode, 8, &mut r);
        let x = Tensor::randn([4, 8], 1.0, &mut r);
        let cfg = AttentionConfig::new(2);
        let got = mha_forward(&x, &w, &CausalMask::new(4), &cfg).unwrap();
        let want = mha_oracle(&x, &w, &cfg);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "{mode}");
    }
}

#[test]
fn mask_shorter_than_input_rejected() {
    let mut r = rng(6);
    let w = random_weights(QueryMode::Linear, 8, &mut r);
    let x = Tensor::randn([4, 8], 1.0, &mut r);
    assert!(mha_forward(&x, &w, &CausalMask::new(3), &AttentionConfig::new(2)).is_err());
}

#[test]
fn reparametrize_identity_and_scaled() {
    let mut r = rng(7);
    let w = random_weights(QueryMode::Linear, 8, &mut r);
    let x = Tensor::randn([4, 8], 1.0, &mut r);
    let (x1, w1) = reparametrize(&x, &w, &Tensor::eye(8)).unwrap();
    assert_eq!(x1, x);
    assert_eq!(w1, w);

    let two = Tensor::eye(8).map(|v| 2.0 * v);
    let (x2, w2) = reparametrize(&x, &w, &two).unwrap();
    assert_eq!(x2, x.map(|v| 2.0 * v));
    assert_eq!(w2.w_k, w.w_k.map(|v| v / 2.0));
    let cfg = AttentionConfig::new(2);
    let m = CausalMask::new(4);
    let d = mha_forward(&x, &w, &m, &cfg)
        .unwrap()
        .max_abs_diff(&mha_forward(&x2, &w2, &m, &cfg).unwrap());
    assert!(d.unwrap() <= 1e-10);
}

#[test]
fn reparametrize_random_theta_preserves_output() {
    let mut r = rng(8);
    let w = random_weights(QueryMode::Linear, 16, &mut r);
    let x = Tensor::randn([8, 16], 1.0, &mut r);
    let theta = random_theta(16, &mut r);
    let (x2, w2) = reparametrize(&x, &w, &theta).unwrap();
    let cfg = AttentionConfig::new(4);
    let m = CausalMask::new(8);
    let d = mha_forward(&x, &w, &m, &cfg)
        .unwrap()
        .max_abs_diff(&mha_forward(&x2, &w2, &m, &cfg).unwrap());
    assert!(d.unwrap() <= 1e-8);
}

#[test]
fn reparametrize_rejects_nonlinear_and_singular() {
    let mut r = rng(9);
    let x = Tensor::randn([4, 8], 1.0, &mut r);
    let rg = random_weights(QueryMode::ResidualGelu, 8, &mut r);
    assert!(reparametrize(&x, &rg, &Tensor::eye(8)).is_err());
    let lin = random_weights(QueryMode::Linear, 8, &mut r);
    let mut sing = Tensor::eye(8);
    sing.set(7, 7, 0.0);
    assert!(matches!(reparametrize(&x, &lin, &sing), Err(Error::Singular { .. })));
}

#[test]
fn absorb_already_identity_is_noop() {
    let mut r = rng(11);
    let mut w = random_weights(QueryMode::Linear, 8, &mut r);
    w.query = QueryWeights::Linear { w_q: Tensor::eye(8) };
    let x = Tensor::randn([4, 8], 1.0, &mut r);
    let (x2, w2) = absorb_query(&x, &w).unwrap();
    assert_eq!(x2, x);
    assert_eq!(w2, w);
}

#[test]
fn absorb_random_query_gives_exact_identity() {
    let mut r = rng(12);
    let w = random_weights(QueryMode::Linear, 16, &mut r);
    let x = Tensor::randn([8, 16], 1.0, &mut r);
    let (x2, w2) = absorb_query(&x, &w).unwrap();
    assert_eq!(w2.query, QueryWeights::Linear { w_q: Tensor::eye(16) });
    let cfg = AttentionConfig::new(4);
    let m = CausalMask::new(8);
    let d = mha_forward(&x, &w, &m, &cfg)
        .unwrap()
        .max_abs_diff(&mha_forward(&x2, &w2, &m, &cfg).unwrap());
    assert!(d.unwrap() <= 1e-8);
}

#[test]
fn absorb_near_singular_query_rejected() {
    let mut r = rng(13);
    let mut w = random_weights(QueryMode::Linear, 8, &mut r);
    let mut wq = Tensor::<f64>::randn([8, 8], 0.3, &mut r);
    for j in 0..8 {
        let v = wq.at(0, j) + 1e-14 * (j as f64);
        wq.set(1, j, v);
    }
    w.query = QueryWeights::Linear { w_q: wq };
    let x = Tensor::randn([4, 8], 1.0, &mut r);
    match absorb_query(&x, &w) {
        Err(Error::Singular { condition, .. }) => assert!(condition > CONDITION_LIMIT),
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn symmetry_cases() {
    let mut r = rng(14);
    let cfg = AttentionConfig::new(2);
    let mut w = random_weights(QueryMode::Linear, 8, &mut r);
    let x = Tensor::randn([5, 8], 1.0, &mut r);
    let indep = logits_symmetry_check(&x, &w, &cfg, 1e-10).unwrap();
    assert!(!indep.is_symmetric);
    w.query = QueryWeights::Linear { w_q: w.w_k.clone() };
    let tied = logits_symmetry_check(&x, &w, &cfg, 1e-10).unwrap();
    assert!(tied.is_symmetric && tied.max_asymmetry <= 1e-10);
    let zero = logits_symmetry_check(&Tensor::zeros([5, 8]), &w, &cfg, 1e-10).unwrap();
    assert_eq!(zero.max_asymmetry, 0.0);
}

#[test]
fn zero_bottleneck_logits_are_half_identity_logits() {
    let mut r = rng(15);
    let mut w = random_weights(QueryMode::ResidualGelu, 8, &mut r);
    if let QueryWeights::ResidualGelu(b) = &mut w.query {
        b.w2 = Tensor::zeros([4, 8]);
    }
    let x = Tensor::randn([6, 8], 1.0, &mut r);
    let cfg = AttentionConfig::new(2);
    let rg = head_logits(&x, &w, &cfg).unwrap();
    let mut wi = w.clone();
    wi.query = QueryWeights::Identity;
    let id = head_logits(&x, &wi, &cfg).unwrap();
    for (a, b) in rg.iter().zip(&id) {
        assert_eq!(*a, b.map(|v| v * 0.5));
    }
}

#[test]
fn causal_output_ignores_future_rows() {
    for mode in QueryMode::ALL {
        let mut r = rng(16);
        let w = random_weights(mode, 8, &mut r);
        let x = Tensor::randn([6, 8], 1.0, &mut r);
        let cfg = AttentionConfig::new(2);
        let m = CausalMask::new(6);
        let base = mha_forward(&x, &w, &m, &cfg).unwrap();
        for j in 0..5 {
            let mut xp = x.clone();
            for i in j + 1..6 {
                for c in 0..8 {
                    xp.set(i, c, xp.at(i, c) + 3.0 * (c as f64 - 3.5));
                }
            }
            let out = mha_forward(&xp, &w, &m, &cfg).unwrap();
            for i in 0..=j {
                assert_eq!(out.row(i), base.row(i), "{mode}: row {i} changed by rows > {j}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn query_projection_commutes_with_row_permutation(seed in any::<u64>(), mode_idx in 0usize..3) {
        let mut r = rng(seed);
        let w = random_weights(QueryMode::ALL[mode_idx], 8, &mut r);
        let x = Tensor::randn([7, 8], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut r);
        let xp = Tensor::from_fn([7, 8], |i| x.at(perm[i / 8], i % 8));
        let cfg = AttentionConfig::new(2);
        let q = query_project(&x, &w, &cfg).unwrap();
        let qp = query_project(&xp, &w, &cfg).unwrap();
        for i in 0..7 {
            prop_assert_eq!(qp.row(i), q.row(perm[i]));
        }
    }
}
