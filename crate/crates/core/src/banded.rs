//! Cholesky factorization of symmetric positive-definite band matrices.

use nalgebra::DMatrix;

use crate::error::{AtpError, Result};

/// Lower Cholesky factor `L` of an SPD matrix with `bandwidth` sub-diagonals,
/// stored row-wise: `band[i * (p + 1) + k]` holds `L[i, i - p + k]`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    p: usize,
    band: Vec<f64>,
}

impl BandCholesky {
    /// Factor the lower band of `a`. Entries outside the band are ignored.
    pub fn factor(a: &DMatrix<f64>, bandwidth: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return Err(AtpError::InvalidArgument("band factor needs a square, nonempty matrix".into()));
        }
        let p = bandwidth;
        let w = p + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            let lo = i.saturating_sub(p);
            for j in lo..=i {
                let mut sum = a[(i, j)];
                let k_lo = lo.max(j.saturating_sub(p));
                for k in k_lo..j {
                    sum -= band[i * w + (k + p - i)] * band[j * w + (k + p - j)];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return Err(AtpError::Singular("band cholesky"));
                    }
                    band[i * w + p] = sum.sqrt();
                } else {
                    band[i * w + (j + p - i)] = sum / band[j * w + p];
                }
            }
        }
        Ok(Self { n, p, band })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn l(&self, i: usize, j: usize) -> f64 {
        self.band[i * (self.p + 1) + (j + self.p - i)]
    }

    /// In-place `L y = b`.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for i in 0..self.n {
            let mut sum = b[i];
            for k in i.saturating_sub(self.p)..i {
                sum -= self.l(i, k) * b[k];
            }
            b[i] = sum / self.l(i, i);
        }
    }

    /// In-place `Lᵀ x = y`.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for i in (0..self.n).rev() {
            let mut sum = b[i];
            for k in i + 1..(i + self.p + 1).min(self.n) {
                sum -= self.l(k, i) * b[k];
            }
            b[i] = sum / self.l(i, i);
        }
    }

    /// In-place `A x = b` with `A = L Lᵀ`.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.solve_lower_in_place(b);
        self.solve_upper_in_place(b);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Dense `L`, for tests and diagnostics.
    pub fn lower(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if j <= i && i - j <= self.p {
                self.l(i, j)
            } else {
                0.0
            }
        })
    }
}
