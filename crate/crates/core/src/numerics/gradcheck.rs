//! Central finite-difference gradient verification (64-bit).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttnShape, GeluKind, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter; larger tensors are sampled at an even stride.
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, g| m.max(g.max_rel_error))
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|analytic − numeric| / (|analytic| + |numeric| + 1e−12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn sample_indices(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        (0..max).map(|i| i * numel / max).collect()
    }
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` builds the loss on a fresh tape from one leaf per entry of `params`.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (p, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.take_or_zero(vars[p], tensor);
        let mut group = GroupReport {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in sample_indices(tensor.numel(), opts.max_coords) {
            let orig = values[p].data()[idx];
            values[p].data_mut()[idx] = orig + opts.eps;
            let plus = eval(&values)?;
            values[p].data_mut()[idx] = orig - opts.eps;
            let minus = eval(&values)?;
            values[p].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            if err > group.max_rel_error || group.checked == 0 {
                group.max_rel_error = err;
                group.worst_index = idx;
                group.analytic = a;
                group.numeric = numeric;
            }
            group.checked += 1;
        }
        report.groups.push(group);
    }
    Ok(report)
}

/// Gradient threshold every primitive must meet.
pub const PRIMITIVE_TOL: f64 = 1e-6;

/// One named check per differentiable tape primitive. Each loss is
/// `Σ out ⊙ R` for a fixed random `R`, so no coordinate of the gradient
/// vanishes by symmetry.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize], std: f64| Tensor::<f64>::randn(shape.to_vec(), std, &mut rng);
    let opts = GradCheckOptions::default();
    let named = |items: Vec<(&str, Tensor<f64>)>| -> Vec<(String, Tensor<f64>)> {
        items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    };
    let gains = |t: Tensor<f64>| t.map(|g| 1.0 + g);

    let (n, d, m) = (5, 6, 4);
    let mut out = Vec::new();
    let r_nd = randn(&[n, d], 1.0);
    let r_nm = randn(&[n, m], 1.0);
    let r_nn = randn(&[n, n], 1.0);

    let weighted = move |t: &mut Tape<f64>, v: Var, r: &Tensor<f64>| -> Result<Var> {
        let w = t.leaf(r.clone());
        let p = t.mul(v, w)?;
        Ok(t.sum(p))
    };

    let ps = named(vec![("a", randn(&[n, d], 1.0)), ("b", randn(&[d, m], 1.0))]);
    let r = r_nm.clone();
    out.push((
        "matmul",
        grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));

    let ps = named(vec![("a", randn(&[n, d], 1.0)), ("b", randn(&[n, d], 1.0))]);
    let r = r_nn.clone();
    out.push((
        "matmul_bt",
        grad_check(
            |t, v| {
                let y = t.matmul_bt(v[0], v[1])?;
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));

    let ps = named(vec![("a", randn(&[n, d], 1.0)), ("b", randn(&[n, d], 1.0))]);
    let r = r_nd.clone();
    out.push((
        "add",
        grad_check(
            |t, v| {
                let y = t.add(v[0], v[1])?;
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));
    out.push((
        "mul",
        grad_check(
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));

    let ps = named(vec![("x", randn(&[n, d], 1.0))]);
    out.push((
        "scale",
        grad_check(
            |t, v| {
                let y = t.scale(v[0], 0.5);
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));
    out.push((
        "gelu_tanh",
        grad_check(
            |t, v| {
                let y = t.gelu(v[0], GeluKind::Tanh);
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));
    out.push((
        "gelu_erf",
        grad_check(
            |t, v| {
                let y = t.gelu(v[0], GeluKind::Erf);
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));

    let ps = named(vec![("x", randn(&[n, d], 1.0)), ("gain", gains(randn(&[d], 0.3)))]);
    out.push((
        "layer_norm",
        grad_check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], 1e-5)?;
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));
    out.push((
        "rms_norm",
        grad_check(
            |t, v| {
                let y = t.rms_norm(v[0], v[1], 1e-5)?;
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));

    let ids = [3usize, 0, 3, 1, 2];
    let ps = named(vec![("table", randn(&[4, d], 1.0))]);
    out.push((
        "embedding",
        grad_check(
            |t, v| {
                let y = t.embedding(v[0], &ids)?;
                weighted(t, y, &r)
            },
            &ps,
            opts,
        )?,
    ));

    let (batch, seq, heads, head_dim) = (2, 4, 2, 3);
    let w = heads * head_dim;
    let ps = named(vec![
        ("q", randn(&[batch * seq, w], 1.0)),
        ("k", randn(&[batch * seq, w], 1.0)),
        ("v", randn(&[batch * seq, w], 1.0)),
    ]);
    let r = randn(&[batch * seq, w], 1.0);
    for (name, causal) in [("attention_causal", true), ("attention_full", false)] {
        let shape = AttnShape {
            batch,
            seq,
            heads,
            head_dim,
            causal,
        };
        out.push((
            name,
            grad_check(
                |t, v| {
                    let y = t.attention(v[0], v[1], v[2], shape)?;
                    weighted(t, y, &r)
                },
                &ps,
                opts,
            )?,
        ));
    }

    let targets = [1usize, 0, 3, 2, 3];
    let ps = named(vec![("logits", randn(&[n, 4], 1.0))]);
    out.push((
        "cross_entropy",
        grad_check(|t, v| t.cross_entropy(v[0], &targets), &ps, opts)?,
    ));

    Ok(out)
}

/// Threshold for [`linear_micro_check`].
pub const LINEAR_TOL: f64 = 1e-10;

/// `Σ (X·W1·W2) ⊙ R`. The loss is linear in each single coordinate, so
/// central differences carry no truncation error and only roundoff remains.
pub fn linear_micro_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = vec![
        ("x".to_string(), Tensor::<f64>::randn([3, 4], 1.0, &mut rng)),
        ("w1".to_string(), Tensor::randn([4, 5], 1.0, &mut rng)),
        ("w2".to_string(), Tensor::randn([5, 2], 1.0, &mut rng)),
    ];
    let r = Tensor::<f64>::randn([3, 2], 1.0, &mut rng);
    grad_check(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let y = t.matmul(h, v[2])?;
            let w = t.leaf(r.clone());
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        },
        &ps,
        GradCheckOptions {
            eps: 1e-3,
            ..GradCheckOptions::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_within_tolerance() {
        let suite = primitive_suite(5).unwrap();
        assert_eq!(suite.len(), 13);
        for (name, report) in suite {
            let worst = report.worst().unwrap();
            eprintln!("{name}: {:.2e}", worst.max_rel_error);
            assert!(report.max_rel_error() <= PRIMITIVE_TOL, "{name}: {worst:?}");
        }
    }

    #[test]
    fn linear_micro_model_is_exact() {
        let r = linear_micro_check(2).unwrap();
        assert_eq!(r.groups.len(), 3);
        assert!(r.max_rel_error() <= LINEAR_TOL, "{:?}", r.worst());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x₀³ enters the value through a detached leaf, so the tape misses its gradient.
        let ps = vec![("x".to_string(), Tensor::<f64>::from_rows(&[&[0.3, -1.2]]))];
        let report = grad_check(
            |t, v| {
                let y = t.mul(v[0], v[0])?;
                let s = t.sum(y);
                let bump = t.leaf(Tensor::scalar(t.value(v[0]).data()[0].powi(3)));
                t.add(s, bump)
            },
            &ps,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.groups[0].max_rel_error > 0.1);
    }

    #[test]
    fn relative_error_is_symmetric_and_bounded() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), relative_error(1.0, 2.0));
        assert!(relative_error(1.0, -1.0) <= 1.0);
    }
}
