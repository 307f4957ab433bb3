//! Basis changes of the attention input and absorption of `W_Q`.
//!
//! For invertible `Θ`, `(X, W_Q, W_K, W_V, W_O) ↦ (XΘ, Θ⁻¹W_Q, Θ⁻¹W_K, Θ⁻¹W_V, W_O)`
//! leaves linear-query attention unchanged because `X` only enters through
//! `XW_Q`, `XW_K`, `XW_V`. `Θ⁻¹W` is formed with an LU solve.

use super::{head_logits, AttentionConfig, AttentionWeights, QueryMode, QueryWeights};
use crate::error::{Error, Result};
use crate::numerics::linalg::{norm_inf, Lu};
use crate::numerics::{ops, Tensor};

/// Max `|Θ·Θ⁻¹ − I|` accepted.
pub const INVERSE_RESIDUAL_TOL: f64 = 1e-6;
/// Max `‖Θ‖∞·‖Θ⁻¹‖∞` accepted.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Factorization of an accepted basis change.
#[derive(Debug)]
pub struct Invertible {
    lu: Lu,
    pub residual: f64,
    pub condition: f64,
}

impl Invertible {
    /// `Θ⁻¹ · w`
    pub fn left_solve(&self, w: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.lu.solve(w)
    }
}

/// Accepts `theta` when `ΘY = I` solves with residual ≤ [`INVERSE_RESIDUAL_TOL`]
/// and the condition estimate stays under [`CONDITION_LIMIT`].
pub fn check_invertible(theta: &Tensor<f64>) -> Result<Invertible> {
    let lu = Lu::factor(theta)?;
    let n = theta.shape()[0];
    let eye = Tensor::eye(n);
    let inv = lu.solve(&eye)?;
    let residual = ops::matmul(theta, &inv)?.max_abs_diff(&eye)?;
    let condition = norm_inf(theta) * norm_inf(&inv);
    if !(residual <= INVERSE_RESIDUAL_TOL) || !(condition <= CONDITION_LIMIT) {
        return Err(Error::Singular { residual, condition });
    }
    Ok(Invertible {
        lu,
        residual,
        condition,
    })
}

/// Applies `Θ` to the input and `Θ⁻¹` to every linear input projection present
/// (`W_Q` in linear mode, always `W_K` and `W_V`). Bottleneck parameters are left
/// as they are, so nonlinear queries are generally not preserved.
pub fn transform_linear_maps(
    x: &Tensor<f64>,
    w: &AttentionWeights<Tensor<f64>>,
    theta: &Tensor<f64>,
) -> Result<(Tensor<f64>, AttentionWeights<Tensor<f64>>)> {
    let inv = check_invertible(theta)?;
    let x2 = ops::matmul(x, theta)?;
    let query = match &w.query {
        QueryWeights::Linear { w_q } => QueryWeights::Linear {
            w_q: inv.left_solve(w_q)?,
        },
        other => other.clone(),
    };
    let w2 = AttentionWeights {
        query,
        w_k: inv.left_solve(&w.w_k)?,
        w_v: inv.left_solve(&w.w_v)?,
        w_o: w.w_o.clone(),
    };
    Ok((x2, w2))
}

/// Linear-mode reparametrization `(XΘ, Θ⁻¹W_Q, Θ⁻¹W_K, Θ⁻¹W_V, W_O)`.
pub fn reparametrize(
    x: &Tensor<f64>,
    w: &AttentionWeights<Tensor<f64>>,
    theta: &Tensor<f64>,
) -> Result<(Tensor<f64>, AttentionWeights<Tensor<f64>>)> {
    require_linear(w)?;
    transform_linear_maps(x, w, theta)
}

/// Reparametrizes with `Θ = W_Q` and sets the new `W_Q` to the exact identity.
pub fn absorb_query(
    x: &Tensor<f64>,
    w: &AttentionWeights<Tensor<f64>>,
) -> Result<(Tensor<f64>, AttentionWeights<Tensor<f64>>)> {
    let QueryWeights::Linear { w_q } = &w.query else {
        return Err(require_linear(w).unwrap_err());
    };
    let (x2, mut w2) = reparametrize(x, w, w_q)?;
    w2.query = QueryWeights::Linear {
        w_q: Tensor::eye(w_q.shape()[0]),
    };
    Ok((x2, w2))
}

fn require_linear<P>(w: &AttentionWeights<P>) -> Result<()> {
    match w.mode() {
        QueryMode::Linear => Ok(()),
        m => Err(Error::InvalidArgument(format!(
            "reparametrization needs linear queries, got {m}"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetryReport {
    pub is_symmetric: bool,
    /// `max_{i,h,a,b} |L^h_{ab} − L^h_{ba}|` over unmasked per-head logits.
    pub max_asymmetry: f64,
}

/// Whether every head's unmasked logit matrix `Q^i K^iᵀ` is symmetric within `tol`.
pub fn logits_symmetry_check(
    x: &Tensor<f64>,
    w: &AttentionWeights<Tensor<f64>>,
    cfg: &AttentionConfig,
    tol: f64,
) -> Result<SymmetryReport> {
    require_linear(w)?;
    let mut max_asymmetry: f64 = 0.0;
    for l in head_logits(x, w, cfg)? {
        let n = l.rows();
        for a in 0..n {
            for b in a + 1..n {
                max_asymmetry = max_asymmetry.max((l.at(a, b) - l.at(b, a)).abs());
            }
        }
    }
    Ok(SymmetryReport {
        is_symmetric: max_asymmetry <= tol,
        max_asymmetry,
    })
}
