//! Envelope (skyline) storage and Cholesky factorization for the normal
//! equations. The solver's elimination order keeps couplings within a narrow
//! band, and the skyline profile is closed under Cholesky fill-in.

use crate::scalar::Real;

/// Symmetric matrix stored by lower-triangular row envelopes: row `i` holds
/// the entries `first[i]..=i`.
#[derive(Debug, Clone)]
pub(crate) struct Envelope<T: Real> {
    n: usize,
    first: Vec<usize>,
    rows: Vec<Vec<T>>,
}

impl<T: Real> Envelope<T> {
    pub fn new(first: Vec<usize>) -> Self {
        let n = first.len();
        debug_assert!(first.iter().enumerate().all(|(i, f)| *f <= i));
        let rows = first
            .iter()
            .enumerate()
            .map(|(i, f)| vec![T::zero(); i - f + 1])
            .collect();
        Self { n, first, rows }
    }

    /// Accumulates into entry (r, c); the pair is mirrored into the stored
    /// lower triangle, which must cover it.
    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: T) {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        debug_assert!(c >= self.first[r], "entry ({r},{c}) outside envelope");
        self.rows[r][c - self.first[r]] += v;
    }

    pub fn add_diagonal(&mut self, lambda: T) {
        for (i, row) in self.rows.iter_mut().enumerate() {
            let last = row.len() - 1;
            debug_assert_eq!(self.first[i] + last, i);
            row[last] += lambda;
        }
    }

    pub fn max_diagonal(&self) -> T {
        self.rows
            .iter()
            .map(|row| row[row.len() - 1])
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }

    /// `y = A x`, using symmetry.
    pub fn mul_sym(&self, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.n);
        y.fill(T::zero());
        for i in 0..self.n {
            let f = self.first[i];
            let row = &self.rows[i];
            let mut acc = T::zero();
            for (offset, &a) in row.iter().enumerate() {
                let j = f + offset;
                acc += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
            y[i] += acc;
        }
    }

    /// In-place Cholesky `A = L L^T` within the envelope. On a non-positive
    /// pivot, returns the offending row.
    pub fn cholesky_in_place(&mut self) -> Result<(), usize> {
        for i in 0..self.n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let start = fi.max(fj);
                let mut sum = self.rows[i][j - fi];
                for k in start..j {
                    sum -= self.rows[i][k - fi] * self.rows[j][k - fj];
                }
                if j < i {
                    self.rows[i][j - fi] = sum / self.rows[j][j - fj];
                } else {
                    if sum <= T::zero() || !sum.is_finite() {
                        return Err(i);
                    }
                    self.rows[i][i - fi] = sum.sqrt();
                }
            }
        }
        Ok(())
    }

    /// Solves `L L^T x = b` in place, after [`Self::cholesky_in_place`].
    pub fn solve_cholesky(&self, b: &mut [T]) {
        debug_assert_eq!(b.len(), self.n);
        // Forward: L y = b.
        for i in 0..self.n {
            let f = self.first[i];
            let row = &self.rows[i];
            let mut sum = b[i];
            for k in f..i {
                sum -= row[k - f] * b[k];
            }
            b[i] = sum / row[i - f];
        }
        // Backward: L^T x = y, scattering column contributions.
        for i in (0..self.n).rev() {
            let f = self.first[i];
            let row = &self.rows[i];
            b[i] /= row[i - f];
            let xi = b[i];
            for k in f..i {
                b[k] -= row[k - f] * xi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded_spd(rng: &mut ChaCha8Rng, n: usize, band: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(band)..=i {
                let v = rng.random_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
            m[(i, i)] += n as f64;
        }
        m
    }

    #[test]
    fn solves_match_dense_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(3..40);
            let band = rng.random_range(1..6).min(n - 1);
            let dense = random_banded_spd(&mut rng, n, band);

            let first: Vec<usize> = (0..n).map(|i| i.saturating_sub(band)).collect();
            let mut env = Envelope::new(first);
            for i in 0..n {
                for j in i.saturating_sub(band)..=i {
                    env.add(i, j, dense[(i, j)]);
                }
            }

            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut y = vec![0.0; n];
            env.mul_sym(&b, &mut y);
            let expect = &dense * DVector::from_column_slice(&b);
            for i in 0..n {
                assert_relative_eq!(y[i], expect[i], max_relative = 1e-12);
            }

            env.cholesky_in_place().unwrap();
            let mut x = b.clone();
            env.solve_cholesky(&mut x);
            let oracle = dense
                .clone()
                .cholesky()
                .unwrap()
                .solve(&DVector::from_column_slice(&b));
            for i in 0..n {
                assert_relative_eq!(x[i], oracle[i], max_relative = 1e-9, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn singular_matrix_reports_failure() {
        let mut env = Envelope::<f64>::new(vec![0, 0]);
        env.add(0, 0, 1.0);
        env.add(1, 0, 1.0);
        env.add(1, 1, 1.0); // rank 1
        assert!(env.cholesky_in_place().is_err());
    }
}
