//! Symmetric banded `L D L^T` factorization without pivoting.
//!
//! The trajectory optimizer's Newton systems are symmetric quasi-definite
//! after static regularization (positive diagonal on primal slots, negative on
//! equality-multiplier slots), for which the signed Cholesky factorization
//! with the natural ordering always exists; no pivoting keeps the
//! factorization deterministic and the band intact. Storage is the lower band
//! in column-major order: entry `(i, j)` with `j <= i <= j + hbw` lives at
//! `data[j * (hbw + 1) + (i - j)]`.

use crate::Real;

/// Symmetric banded matrix with half-bandwidth `hbw`, lower band stored.
#[derive(Clone, Debug)]
pub struct BandMatrix<F> {
    n: usize,
    hbw: usize,
    data: Vec<F>,
}

impl<F: Real> BandMatrix<F> {
    pub fn zeros(n: usize, hbw: usize) -> Self {
        Self { n, hbw, data: vec![F::zero(); n * (hbw + 1)] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn reset(&mut self) {
        self.data.fill(F::zero());
    }

    /// Add `val` to entry `(i, j)`; symmetric, so only the lower triangle is
    /// touched. Panics if the entry lies outside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, val: F) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(r - c <= self.hbw, "entry ({i},{j}) outside half-bandwidth {}", self.hbw);
        self.data[c * (self.hbw + 1) + (r - c)] = self.data[c * (self.hbw + 1) + (r - c)] + val;
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> F {
        debug_assert!(i >= j && i - j <= self.hbw);
        self.data[j * (self.hbw + 1) + (i - j)]
    }

    /// In-place `L D L^T`. After success the band holds `L` (unit diagonal
    /// implicit) and `D` on the diagonal. Fails on a vanishing pivot.
    pub fn factor_ldl(&mut self) -> Result<(), &'static str> {
        let w = self.hbw + 1;
        for j in 0..self.n {
            let lo = j.saturating_sub(self.hbw);
            // d_j = a_jj - sum_k l_jk^2 d_k
            let mut d = self.data[j * w];
            for k in lo..j {
                let l_jk = self.data[k * w + (j - k)];
                let d_k = self.data[k * w];
                d = d - l_jk * l_jk * d_k;
            }
            if d.abs() < F::of(1e-300) {
                return Err("zero pivot in LDL^T");
            }
            self.data[j * w] = d;
            let top = (j + self.hbw).min(self.n - 1);
            for i in (j + 1)..=top {
                // l_ij = (a_ij - sum_k l_ik l_jk d_k) / d_j
                let mut s = self.data[j * w + (i - j)];
                let klo = i.saturating_sub(self.hbw).max(lo);
                for k in klo..j {
                    let l_ik = self.data[k * w + (i - k)];
                    let l_jk = self.data[k * w + (j - k)];
                    let d_k = self.data[k * w];
                    s = s - l_ik * l_jk * d_k;
                }
                self.data[j * w + (i - j)] = s / d;
            }
        }
        Ok(())
    }

    /// Solve `L D L^T x = b` in place using a prior [`factor_ldl`].
    pub fn solve_in_place(&self, b: &mut [F]) {
        assert_eq!(b.len(), self.n);
        let w = self.hbw + 1;
        // Forward: L z = b.
        for j in 0..self.n {
            let bj = b[j];
            let top = (j + self.hbw).min(self.n - 1);
            for i in (j + 1)..=top {
                b[i] = b[i] - self.data[j * w + (i - j)] * bj;
            }
        }
        // Diagonal.
        for j in 0..self.n {
            b[j] = b[j] / self.data[j * w];
        }
        // Backward: L^T x = y.
        for j in (0..self.n).rev() {
            let top = (j + self.hbw).min(self.n - 1);
            let mut s = b[j];
            for i in (j + 1)..=top {
                s = s - self.data[j * w + (i - j)] * b[i];
            }
            b[j] = s;
        }
    }

    /// Multiply `y = A x` from the stored symmetric band (pre-factorization).
    pub fn mul_vec(&self, x: &[F], y: &mut [F]) {
        assert_eq!(x.len(), self.n);
        y.fill(F::zero());
        for j in 0..self.n {
            y[j] = y[j] + self.at(j, j) * x[j];
            let top = (j + self.hbw).min(self.n - 1);
            for i in (j + 1)..=top {
                let a = self.at(i, j);
                y[i] = y[i] + a * x[j];
                y[j] = y[j] + a * x[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fill_spd(n: usize, hbw: usize) -> BandMatrix<f64> {
        let mut m = BandMatrix::zeros(n, hbw);
        for j in 0..n {
            m.add(j, j, 4.0 + (j % 3) as f64);
            if j + 1 < n {
                m.add(j + 1, j, -1.0 + 0.1 * (j % 5) as f64);
            }
            if hbw >= 2 && j + 2 < n {
                m.add(j + 2, j, 0.3);
            }
        }
        m
    }

    #[test]
    fn factor_solve_roundtrip() {
        let m = fill_spd(40, 2);
        let x_true: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut b = vec![0.0; 40];
        m.mul_vec(&x_true, &mut b);
        let mut f = m.clone();
        f.factor_ldl().unwrap();
        f.solve_in_place(&mut b);
        for (a, e) in b.iter().zip(&x_true) {
            assert_relative_eq!(a, e, epsilon = 1e-10);
        }
    }

    #[test]
    fn quasi_definite_factors_without_pivoting() {
        // [ 2  1; 1 -3 ] style blocks: positive then negative diagonal.
        let n = 30;
        let mut m = BandMatrix::zeros(n, 1);
        for j in 0..n {
            m.add(j, j, if j % 2 == 0 { 2.0 } else { -3.0 });
            if j + 1 < n {
                m.add(j + 1, j, 1.0);
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| 1.0 - (i as f64) * 0.05).collect();
        let mut b = vec![0.0; n];
        m.mul_vec(&x_true, &mut b);
        let mut f = m.clone();
        f.factor_ldl().unwrap();
        f.solve_in_place(&mut b);
        for (a, e) in b.iter().zip(&x_true) {
            assert_relative_eq!(a, e, epsilon = 1e-10);
        }
    }

    #[test]
    fn rejects_singular() {
        let mut m = BandMatrix::<f64>::zeros(3, 1);
        m.add(0, 0, 1.0);
        // middle pivot exactly zero
        assert!(m.factor_ldl().is_err());
    }

    #[test]
    fn generic_over_f32() {
        let mut m = BandMatrix::<f32>::zeros(4, 1);
        for j in 0..4 {
            m.add(j, j, 3.0);
        }
        let mut b = vec![3.0f32; 4];
        m.factor_ldl().unwrap();
        m.solve_in_place(&mut b);
        for v in b {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
