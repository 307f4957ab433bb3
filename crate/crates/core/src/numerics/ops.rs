//! Forward-only tensor operations.

use super::kernels::{self, GeluKind};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn check_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = check_matmul(a, b)?;
    Tensor::new([m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    gelu_with(x, GeluKind::Tanh)
}

pub fn gelu_with<T: Scalar>(x: &Tensor<T>, kind: GeluKind) -> Tensor<T> {
    x.map(|v| kernels::gelu_scalar(v, kind))
}

pub(crate) fn check_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, op: &'static str) -> Result<usize> {
    let d = x.cols();
    if x.rank() == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "{op}: trailing dimension must be non-zero"
        )));
    }
    if gain.shape() != [d] {
        return Err(Error::shape(op, x.shape(), gain.shape()));
    }
    Ok(d)
}

/// Per-row `(x − mean) / sqrt(var + eps) ⊙ gain`, population variance, no bias.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = check_norm(x, gain, "layer_norm")?;
    let (y, _, _) = kernels::layer_norm(x.data(), gain.data(), d, T::of(eps));
    Tensor::new(x.shape(), y)
}

/// Per-row `x / sqrt(mean(x²) + eps) ⊙ gain`.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = check_norm(x, gain, "rms_norm")?;
    let (y, _) = kernels::rms_norm(x.data(), gain.data(), d, T::of(eps));
    Tensor::new(x.shape(), y)
}

/// Row-wise softmax over the trailing dimension. `-inf` entries map to exactly 0.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    if c > 0 {
        out.data_mut().chunks_exact_mut(c).for_each(kernels::softmax_row);
    }
    out
}

/// Mean negative log-probability of `targets` under row-wise softmax of `logits[n×V]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let nll = cross_entropy_per_row(logits, targets)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

pub fn cross_entropy_per_row<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<f64>> {
    let vocab = check_cross_entropy(logits, targets)?;
    Ok(kernels::cross_entropy_rows(logits.data(), targets, vocab).0)
}

pub(crate) fn check_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<usize> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() || targets.is_empty() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let vocab = logits.shape()[1];
    if let Some(&index) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::TargetOutOfRange { index, vocab });
    }
    Ok(vocab)
}
