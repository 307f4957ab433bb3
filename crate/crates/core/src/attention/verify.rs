//! Randomized suites for the reparametrization claims, shared by the CLI and
//! the acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::reparam::{absorb_query, check_invertible, logits_symmetry_check, reparametrize, transform_linear_maps};
use super::{mha_forward, AttentionConfig, AttentionWeights, Bottleneck, CausalMask, QueryMode, QueryWeights};
use crate::error::Result;
use crate::numerics::Tensor;

/// Output deviation allowed by the invariance and absorption suites.
pub const INVARIANCE_TOL: f64 = 1e-8;
/// Deviation a nonlinear-query trial must exceed to count as escaping.
pub const ESCAPE_MIN_DEVIATION: f64 = 1e-3;
/// Fraction of nonlinear trials that must escape.
pub const ESCAPE_MIN_FRACTION: f64 = 0.95;
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyDims {
    pub d: usize,
    pub n_head: usize,
    pub n: usize,
}

impl Default for VerifyDims {
    fn default() -> Self {
        Self { d: 16, n_head: 4, n: 8 }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub bound: String,
    pub trials: usize,
    pub passing: usize,
    pub required: usize,
    pub max_deviation: f64,
    pub min_deviation: f64,
    /// Per-trial deviation (asymmetry for the symmetry suite), in trial order.
    pub deviations: Vec<f64>,
    /// Description of the first failing trial, if any.
    pub failure: Option<String>,
}

impl SuiteReport {
    fn new(name: &'static str, bound: String, trials: usize, required: usize) -> Self {
        Self {
            name,
            bound,
            trials,
            passing: 0,
            required,
            max_deviation: 0.0,
            min_deviation: f64::INFINITY,
            deviations: Vec::with_capacity(trials),
            failure: None,
        }
    }

    fn record(&mut self, deviation: f64, ok: bool, describe: impl FnOnce() -> String) {
        self.max_deviation = self.max_deviation.max(deviation);
        self.min_deviation = self.min_deviation.min(deviation);
        self.deviations.push(deviation);
        if ok {
            self.passing += 1;
        } else if self.failure.is_none() {
            self.failure = Some(describe());
        }
    }

    pub fn passed(&self) -> bool {
        self.passing >= self.required
    }
}

fn trial_rng(seed: u64, suite: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (suite << 48) ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Random layer with `O(1)` activations: projections `N(0, 1/d)`, bottleneck
/// gains near 1.
pub fn random_weights(mode: QueryMode, d: usize, rng: &mut ChaCha8Rng) -> AttentionWeights<Tensor<f64>> {
    let s = 1.0 / (d as f64).sqrt();
    let query = match mode {
        QueryMode::Linear => QueryWeights::Linear {
            w_q: Tensor::randn([d, d], s, rng),
        },
        QueryMode::Identity => QueryWeights::Identity,
        QueryMode::ResidualGelu => {
            let r = d / 2;
            QueryWeights::ResidualGelu(Bottleneck {
                w1: Tensor::randn([d, r], s, rng),
                w2: Tensor::randn([r, d], 1.0 / (r as f64).sqrt(), rng),
                rms_gain: Tensor::randn([d], 0.1, rng).map(|g| g + 1.0),
                ln_gain: Tensor::randn([d], 0.1, rng).map(|g| g + 1.0),
            })
        }
    };
    AttentionWeights {
        query,
        w_k: Tensor::randn([d, d], s, rng),
        w_v: Tensor::randn([d, d], s, rng),
        w_o: Tensor::randn([d, d], s, rng),
    }
}

/// `Θ = I + G/(2√d)` resampled until its condition estimate is below 100.
pub fn random_theta(d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    loop {
        let g = Tensor::<f64>::randn([d, d], 0.5 / (d as f64).sqrt(), rng);
        let theta = Tensor::from_fn([d, d], |i| g.data()[i] + if i / d == i % d { 1.0 } else { 0.0 });
        if check_invertible(&theta).is_ok_and(|inv| inv.condition < 100.0) {
            return theta;
        }
    }
}

fn deviation(
    x: &Tensor<f64>,
    w: &AttentionWeights<Tensor<f64>>,
    x2: &Tensor<f64>,
    w2: &AttentionWeights<Tensor<f64>>,
    cfg: &AttentionConfig,
) -> Result<f64> {
    let mask = CausalMask::new(x.rows());
    let a = mha_forward(x, w, &mask, cfg)?;
    let b = mha_forward(x2, w2, &mask, cfg)?;
    a.max_abs_diff(&b)
}

/// Linear-query invariance under random well-conditioned `Θ`. Trial 0 uses `Θ = I`.
pub fn reparametrization_suite(seed: u64, trials: usize, dims: VerifyDims) -> Result<SuiteReport> {
    let cfg = AttentionConfig::new(dims.n_head);
    let mut report = SuiteReport::new(
        "reparametrization",
        format!("max |Δ| <= {INVARIANCE_TOL:e}"),
        trials,
        trials,
    );
    for t in 0..trials {
        let mut rng = trial_rng(seed, 1, t);
        let w = random_weights(QueryMode::Linear, dims.d, &mut rng);
        let x = Tensor::randn([dims.n, dims.d], 1.0, &mut rng);
        let theta = if t == 0 {
            Tensor::eye(dims.d)
        } else {
            random_theta(dims.d, &mut rng)
        };
        let (x2, w2) = reparametrize(&x, &w, &theta)?;
        let dev = deviation(&x, &w, &x2, &w2, &cfg)?;
        report.record(dev, dev <= INVARIANCE_TOL, || {
            format!(
                "trial {t} (seed {seed}): deviation {dev:.3e}\ntheta = {:?}",
                theta.data()
            )
        });
    }
    Ok(report)
}

/// `Θ = W_Q`: the absorbed layer must carry an exact identity `W_Q`.
pub fn absorption_suite(seed: u64, trials: usize, dims: VerifyDims) -> Result<SuiteReport> {
    let cfg = AttentionConfig::new(dims.n_head);
    let mut report = SuiteReport::new(
        "query-absorption",
        format!("W_Q' == I exactly, max |Δ| <= {INVARIANCE_TOL:e}"),
        trials,
        trials,
    );
    let eye = Tensor::eye(dims.d);
    for t in 0..trials {
        let mut rng = trial_rng(seed, 2, t);
        let w = random_weights(QueryMode::Linear, dims.d, &mut rng);
        let x = Tensor::randn([dims.n, dims.d], 1.0, &mut rng);
        let (x2, w2) = absorb_query(&x, &w)?;
        let exact = matches!(&w2.query, QueryWeights::Linear { w_q } if *w_q == eye);
        let dev = deviation(&x, &w, &x2, &w2, &cfg)?;
        report.record(dev, exact && dev <= INVARIANCE_TOL, || {
            format!("trial {t} (seed {seed}): deviation {dev:.3e}, identity exact: {exact}")
        });
    }
    Ok(report)
}

/// The same harness with residual-bottleneck queries; trials must deviate.
pub fn escape_suite(seed: u64, trials: usize, dims: VerifyDims) -> Result<SuiteReport> {
    let cfg = AttentionConfig::new(dims.n_head);
    let required = (ESCAPE_MIN_FRACTION * trials as f64).ceil() as usize;
    let mut report = SuiteReport::new(
        "nonlinear-escape",
        format!("|Δ| > {ESCAPE_MIN_DEVIATION:e} in >= {required}/{trials}"),
        trials,
        required,
    );
    for t in 0..trials {
        let mut rng = trial_rng(seed, 3, t);
        let w = random_weights(QueryMode::ResidualGelu, dims.d, &mut rng);
        let x = Tensor::randn([dims.n, dims.d], 1.0, &mut rng);
        let theta = random_theta(dims.d, &mut rng);
        let (x2, w2) = transform_linear_maps(&x, &w, &theta)?;
        let dev = deviation(&x, &w, &x2, &w2, &cfg)?;
        report.record(dev, dev > ESCAPE_MIN_DEVIATION, || {
            format!("trial {t} (seed {seed}): deviation only {dev:.3e}")
        });
    }
    Ok(report)
}

/// Tied `W_Q = W_K` gives symmetric logits; independent ones do not; `X = 0` is trivially symmetric.
pub fn symmetry_suite(seed: u64, trials: usize, dims: VerifyDims) -> Result<SuiteReport> {
    let cfg = AttentionConfig::new(dims.n_head);
    let mut report = SuiteReport::new(
        "logit-symmetry",
        format!("tied asym <= {SYMMETRY_TOL:e}, independent asym > {SYMMETRY_TOL:e}"),
        trials,
        trials,
    );
    for t in 0..trials {
        let mut rng = trial_rng(seed, 4, t);
        let mut w = random_weights(QueryMode::Linear, dims.d, &mut rng);
        let x = if t == 0 {
            Tensor::zeros([dims.n, dims.d])
        } else {
            Tensor::randn([dims.n, dims.d], 1.0, &mut rng)
        };
        let independent = logits_symmetry_check(&x, &w, &cfg, SYMMETRY_TOL)?;
        w.query = QueryWeights::Linear { w_q: w.w_k.clone() };
        let tied = logits_symmetry_check(&x, &w, &cfg, SYMMETRY_TOL)?;
        let ok = tied.is_symmetric && (t == 0 || !independent.is_symmetric);
        report.record(tied.max_asymmetry, ok, || {
            format!(
                "trial {t} (seed {seed}): tied asym {:.3e}, independent asym {:.3e}",
                tied.max_asymmetry, independent.max_asymmetry
            )
        });
    }
    Ok(report)
}
