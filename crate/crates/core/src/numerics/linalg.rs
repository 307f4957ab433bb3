//! Dense LU factorization with partial pivoting (64-bit).

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Tensor<f64>) -> Result<Self> {
        if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(Error::InvalidArgument(format!(
                "LU needs a square matrix, got {:?}",
                a.shape()
            )));
        }
        let n = a.shape()[0];
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
                .unwrap_or(col);
            if pivot != col {
                for j in 0..n {
                    lu.swap(pivot * n + j, col * n + j);
                }
                perm.swap(pivot, col);
            }
            let diag = lu[col * n + col];
            if diag == 0.0 || !diag.is_finite() {
                return Err(Error::Singular {
                    residual: f64::INFINITY,
                    condition: f64::INFINITY,
                });
            }
            for i in col + 1..n {
                let f = lu[i * n + col] / diag;
                lu[i * n + col] = f;
                for j in col + 1..n {
                    lu[i * n + j] -= f * lu[col * n + j];
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    /// Solves `A · X = B` for `B[n×m]`.
    pub fn solve(&self, b: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = self.n;
        if b.rank() != 2 || b.shape()[0] != n {
            return Err(Error::shape("lu_solve", &[n, n], b.shape()));
        }
        let m = b.shape()[1];
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(b.row(p));
        }
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[i * n + k];
                for j in 0..m {
                    x[i * m + j] -= f * x[k * m + j];
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu[i * n + k];
                for j in 0..m {
                    x[i * m + j] -= f * x[k * m + j];
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                x[i * m + j] /= d;
            }
        }
        Tensor::new([n, m], x)
    }
}

/// Infinity norm (max absolute row sum).
pub fn norm_inf(a: &Tensor<f64>) -> f64 {
    (0..a.rows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::matmul;

    #[test]
    fn solves_permuted_system() {
        let a = Tensor::from_rows(&[&[0.0, 2.0, 1.0], &[1.0, 1.0, 0.0], &[3.0, 0.0, 1.0]]);
        let x = Tensor::from_rows(&[&[1.0, 0.5], &[-2.0, 1.0], &[3.0, 0.0]]);
        let b = matmul(&a, &x).unwrap();
        let got = Lu::factor(&a).unwrap().solve(&b).unwrap();
        assert!(got.max_abs_diff(&x).unwrap() < 1e-14);
    }

    #[test]
    fn exactly_singular_rejected() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(Lu::factor(&a), Err(Error::Singular { .. })));
    }
}
