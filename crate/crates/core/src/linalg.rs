//! Symmetric positive-definite solves with an escalating jitter ladder.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Diagonal jitter values tried in order after a plain factorization fails.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factor of `A + jitter * I`.
#[derive(Clone, Debug)]
pub struct SpdFactor<T: Real> {
    chol: Cholesky<T, Dyn>,
    jitter: T,
}

impl<T: Real> SpdFactor<T> {
    /// Factors a symmetric matrix, adding the smallest ladder jitter that succeeds.
    pub fn new(matrix: DMatrix<T>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch {
                context: "symmetric factorization",
                expected: matrix.nrows(),
                found: matrix.ncols(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric factorization input"));
        }
        if let Some(chol) = Cholesky::new(matrix.clone()) {
            return Ok(Self {
                chol,
                jitter: T::zero(),
            });
        }
        let n = matrix.nrows();
        for &j in JITTER_LADDER.iter() {
            let jitter = lit::<T>(j);
            let mut shifted = matrix.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                return Ok(Self { chol, jitter });
            }
        }
        Err(Error::NotPositiveDefinite {
            size: n,
            max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
        })
    }

    /// Jitter that was added to the diagonal (zero when none was needed).
    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<T> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> T {
        let l = self.chol.l_dirty();
        let two = lit::<T>(2.0);
        (0..l.nrows()).fold(T::zero(), |acc, i| acc + two * l[(i, i)].ln())
    }

    /// Solves `L z = b` for the lower factor, so that `‖z‖² = bᵀ A⁻¹ b`.
    pub fn whiten(&self, b: &DVector<T>) -> DVector<T> {
        let mut z = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut z);
        z
    }

    pub fn lower(&self) -> DMatrix<T> {
        self.chol.l()
    }
}

/// Gram matrix `Φ Φᵀ` (N×N).
pub fn outer_gram<T: Real>(phi: &DMatrix<T>) -> DMatrix<T> {
    phi * phi.transpose()
}

/// `Σ a_i b_i` with four partial sums so the loop vectorises.
fn dot_slices<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Squared Frobenius norm, i.e. `tr(Φ Φᵀ)`.
pub fn frobenius_sq<T: Real>(m: &DMatrix<T>) -> T {
    dot_slices(m.as_slice(), m.as_slice())
}

/// Squared Euclidean norm of every column.
pub fn column_norms_sq<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    let n = m.nrows();
    if n == 0 {
        return DVector::zeros(m.ncols());
    }
    DVector::from_iterator(
        m.ncols(),
        m.as_slice().chunks_exact(n).map(|c| dot_slices(c, c)),
    )
}

/// `Σ_ij a_ij b_ij`.
pub fn frobenius_dot<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    debug_assert_eq!(a.shape(), b.shape());
    dot_slices(a.as_slice(), b.as_slice())
}
