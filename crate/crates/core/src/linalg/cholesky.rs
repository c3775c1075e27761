use super::{dot, Matrix};
use crate::error::{Error, Result};

/// Lower-triangular `L` with `A + ridge*I = L * L^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    l: Matrix,
}

impl CholeskyFactor {
    /// Factorizes `a + ridge * I`. Only the lower triangle of `a` is read.
    pub fn factor(a: &Matrix, ridge: f64) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Shape {
                expected: n,
                actual: a.cols(),
            });
        }
        if !(ridge >= 0.0) {
            return Err(Error::Argument(format!("ridge must be non-negative, got {ridge}")));
        }
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s = dot(&l.row(i)[..j], &l.row(j)[..j]);
                if i == j {
                    let pivot = a[(i, i)] + ridge - s;
                    if !(pivot > 0.0) || !pivot.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i, value: pivot });
                    }
                    l[(i, i)] = pivot.sqrt();
                } else {
                    l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
                }
            }
        }
        Ok(Self { l })
    }

    /// Rebuilds a factor from its packed lower triangle (row-major).
    pub fn from_packed(dim: usize, packed: &[f64]) -> Result<Self> {
        if packed.len() != dim * (dim + 1) / 2 {
            return Err(Error::Shape {
                expected: dim * (dim + 1) / 2,
                actual: packed.len(),
            });
        }
        let mut l = Matrix::zeros(dim, dim);
        let mut it = packed.iter();
        for i in 0..dim {
            for j in 0..=i {
                l[(i, j)] = *it.next().unwrap();
            }
            if !(l[(i, i)] > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    pivot: i,
                    value: l[(i, i)],
                });
            }
        }
        Ok(Self { l })
    }

    pub fn packed(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            out.extend_from_slice(&self.l.row(i)[..=i]);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    /// `L * L^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut out = Matrix::zeros(self.dim(), self.dim());
        super::gemm(1.0, &self.l, false, &self.l, true, 0.0, &mut out);
        out
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_dim(self.dim(), b.len())?;
        let mut y = vec![0.0; b.len()];
        for i in 0..b.len() {
            let s = dot(&self.l.row(i)[..i], &y[..i]);
            y[i] = (b[i] - s) / self.l[(i, i)];
        }
        Ok(y)
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.solve_lower(b)?;
        let n = x.len();
        for i in (0..n).rev() {
            let mut s = x[i];
            for (k, xk) in x.iter().enumerate().skip(i + 1) {
                s -= self.l[(k, i)] * xk;
            }
            x[i] = s / self.l[(i, i)];
        }
        Ok(x)
    }

    /// `v^T (L L^T)^{-1} v`, computed as `|L^{-1} v|^2`.
    pub fn inverse_quad_form(&self, v: &[f64]) -> Result<f64> {
        let y = self.solve_lower(v)?;
        Ok(dot(&y, &y))
    }
}
