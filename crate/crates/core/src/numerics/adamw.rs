//! AdamW with global-norm gradient clipping.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState<T: Scalar> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    /// Whether decoupled weight decay applies to each parameter.
    decay: Vec<bool>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1 when unclipped).
    pub clip_scale: f64,
}

impl<T: Scalar> AdamWState<T> {
    /// `params` gives each parameter's shape and whether it is decayed.
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = (&'a [usize], bool)>) -> Self {
        let (mut m, mut v, mut decay) = (Vec::new(), Vec::new(), Vec::new());
        for (shape, d) in params {
            m.push(Tensor::zeros(shape));
            v.push(Tensor::zeros(shape));
            decay.push(d);
        }
        Self {
            config,
            m,
            v,
            decay,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Gradients are clipped to global norm `clip` (skipped when
    /// `clip <= 0`). A non-finite gradient leaves parameters and state untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
        clip: f64,
    ) -> Result<StepStats> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adamw: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }

        let grad_norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
        let clip_scale = if clip > 0.0 && grad_norm > clip {
            clip / (grad_norm + 1e-6)
        } else {
            1.0
        };

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        let scale = T::of(clip_scale);
        let shrink = T::of(1.0 - lr * c.weight_decay);

        for i in 0..params.len() {
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            let decay = self.decay[i] && c.weight_decay != 0.0;
            for j in 0..p.len() {
                let gj = g[j] * scale;
                if decay {
                    p[j] = p[j] * shrink;
                }
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepStats { grad_norm, clip_scale })
    }
}
