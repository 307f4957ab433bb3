//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are strictly earlier nodes, so
//! the tape is already in topological order and the backward pass simply walks
//! it from the loss down to index 0. Gradient contributions reaching the same
//! node are summed in that fixed walk order.

use super::kernels::{self, AttnShape, GeluKind};
use super::{ops, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulBt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Sum {
        a: Var,
    },
    Gelu {
        a: Var,
        kind: GeluKind,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::shape("matmul_bt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let out = Tensor::new([m, n], kernels::matmul_bt(av.data(), bv.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMulBt { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale { a, s })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn gelu(&mut self, a: Var, kind: GeluKind) -> Var {
        let out = ops::gelu_with(self.value(a), kind);
        self.push(out, Op::Gelu { a, kind })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = ops::check_norm(self.value(x), self.value(gain), "layer_norm")?;
        let xv = self.value(x);
        let (y, xhat, rstd) = kernels::layer_norm(xv.data(), self.value(gain).data(), d, T::of(eps));
        let out = Tensor::new(xv.shape(), y)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, xhat, rstd }))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = ops::check_norm(self.value(x), self.value(gain), "rms_norm")?;
        let xv = self.value(x);
        let (y, rstd) = kernels::rms_norm(xv.data(), self.value(gain).data(), d, T::of(eps));
        let out = Tensor::new(xv.shape(), y)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, rstd }))
    }

    /// Gathers rows `ids` of `table[V×d]` into `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[ids.len()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TargetOutOfRange { index: id, vocab: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new([ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `shape.batch` independent
    /// sequences; `q`, `k`, `v` are `[batch·seq, heads·head_dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let want = [shape.batch * shape.seq, shape.width()];
        for var in [q, k, v] {
            if self.value(var).shape() != want {
                return Err(Error::shape("attention", self.value(var).shape(), &want));
            }
        }
        let (out, probs) = kernels::attention(self.value(q).data(), self.value(k).data(), self.value(v).data(), &shape);
        let out = Tensor::new(want, out)?;
        Ok(self.push(out, Op::Attention { q, k, v, shape, probs }))
    }

    /// Mean cross-entropy of `logits[n×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = ops::check_cross_entropy(lv, targets)?;
        let (nll, probs) = kernels::cross_entropy_rows(lv.data(), targets, vocab);
        let mean = nll.iter().sum::<f64>() / nll.len() as f64;
        Ok(self.push(
            Tensor::scalar(T::of(mean)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let n = val(*b).shape()[1];
                    accumulate(&mut grads, *a, kernels::matmul_bt(&g, val(*b).data(), m, n, k));
                    accumulate(&mut grads, *b, kernels::matmul_at(val(*a).data(), &g, m, k, n));
                }
                Op::MatMulBt { a, b } => {
                    let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let n = val(*b).shape()[0];
                    accumulate(&mut grads, *a, kernels::matmul(&g, val(*b).data(), m, n, k));
                    accumulate(&mut grads, *b, kernels::matmul_at(&g, val(*a).data(), m, n, k));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let da = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    let db = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { a, s } => {
                    accumulate(&mut grads, *a, g.iter().map(|&x| x * *s).collect());
                }
                Op::Sum { a } => {
                    accumulate(&mut grads, *a, vec![g[0]; val(*a).numel()]);
                }
                Op::Gelu { a, kind } => {
                    let da = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&gy, &x)| gy * kernels::gelu_grad_scalar(x, *kind))
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gain, xhat, rstd } => {
                    let d = val(*gain).numel();
                    let (dx, dg) = kernels::layer_norm_backward(&g, xhat, rstd, val(*gain).data(), d);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dg);
                }
                Op::RmsNorm { x, gain, rstd } => {
                    let d = val(*gain).numel();
                    let (dx, dg) = kernels::rms_norm_backward(&g, val(*x).data(), rstd, val(*gain).data(), d);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dg);
                }
                Op::Embedding { table, ids } => {
                    let t = val(*table);
                    let d = t.shape()[1];
                    let mut dt = vec![T::zero(); t.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::add_assign(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let (dq, dk, dv) =
                        kernels::attention_backward(&g, val(*q).data(), val(*k).data(), val(*v).data(), probs, shape);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let vocab = val(*logits).shape()[1];
                    let scale = g[0] / T::of(targets.len() as f64);
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * vocab + t] = dl[r * vocab + t] - T::one();
                    }
                    dl.iter_mut().for_each(|x| *x = *x * scale);
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|data| Tensor::new(node.value.shape(), data).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => kernels::add_assign(acc, &contribution),
        slot @ None => *slot = Some(contribution),
    }
}

/// Result of [`Tape::backward`]; holds gradients of leaves.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled to `shape_of`'s shape if unreachable.
    pub fn take_or_zero(&mut self, v: Var, shape_of: &Tensor<T>) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape_of.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_rows(&[&[1.0, -2.0, 0.25]]);
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full([3], 2.0));
        let b = tape.leaf(Tensor::full([3], 1.0));
        let s = tape.sum(a);
        let mut g = tape.backward(s).unwrap();
        assert!(g.get(b).is_none());
        let bt = tape.value(b).clone();
        assert_eq!(g.take_or_zero(b, &bt), Tensor::zeros([3]));
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let t = tape.leaf(Tensor::zeros([4, 2]));
        assert!(tape.embedding(t, &[0, 4]).is_err());
    }
}
