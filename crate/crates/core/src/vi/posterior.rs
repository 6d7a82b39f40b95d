use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{column_norms_sq, frobenius_sq, SpdFactor};
use crate::scalar::{lit, Real};

/// Covariance family of the approximate posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    #[serde(rename = "diag")]
    Diagonal,
    #[serde(rename = "rank1")]
    RankOne,
    #[serde(rename = "full")]
    FullRank,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Diagonal, Structure::RankOne, Structure::FullRank];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Diagonal => "diag",
            Structure::RankOne => "rank1",
            Structure::FullRank => "full",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diag" | "diagonal" => Ok(Structure::Diagonal),
            "rank1" | "rank-1" | "rankone" => Ok(Structure::RankOne),
            "full" | "fullrank" | "full-rank" => Ok(Structure::FullRank),
            other => Err(Error::InvalidArgument(format!(
                "unknown structure `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
enum SpdRepr<T: Real> {
    Dense(DMatrix<T>),
    /// `τ I − τ² Bᵀ (a I + τ B Bᵀ)⁻¹ B` for a k×R basis `B`, kept through the
    /// eigendecomposition `B Bᵀ = U Λ Uᵀ` with `rotated = Uᵀ B`.
    Woodbury {
        scale: T,
        shift: T,
        basis: DMatrix<T>,
        eigenvectors: DMatrix<T>,
        eigenvalues: DVector<T>,
        rotated: DMatrix<T>,
    },
}

/// Symmetric positive-definite R×R covariance.
///
/// Stored either densely or in the identity-minus-low-rank form produced by
/// the closed-form update when `R > N`; both expose the same operations.
#[derive(Clone, Debug)]
pub struct SpdCovariance<T: Real> {
    dim: usize,
    repr: SpdRepr<T>,
    log_det: T,
}

impl<T: Real> SpdCovariance<T> {
    /// Validates symmetry and positive pivots (no jitter is applied).
    pub fn from_matrix(matrix: DMatrix<T>) -> Result<Self> {
        check_dim("covariance shape", matrix.nrows(), matrix.ncols())?;
        let n = matrix.nrows();
        let scale = matrix.amax().max(T::one());
        let tol = lit::<T>(1e-10) * scale;
        for i in 0..n {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > tol {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        let factor = SpdFactor::new(matrix.clone())?;
        if factor.jitter() > T::zero() {
            return Err(Error::NotPositiveDefinite {
                size: n,
                max_jitter: 0.0,
            });
        }
        Ok(Self {
            dim: n,
            log_det: factor.log_det(),
            repr: SpdRepr::Dense(matrix),
        })
    }

    pub fn scaled_identity(dim: usize, scale: T) -> Result<Self> {
        if !(scale > T::zero()) {
            return Err(Error::InvalidArgument(
                "identity scale must be positive".into(),
            ));
        }
        Self::woodbury(scale, T::one(), DMatrix::zeros(0, dim))
    }

    pub(crate) fn dense_with_log_det(matrix: DMatrix<T>, log_det: T) -> Self {
        Self {
            dim: matrix.nrows(),
            repr: SpdRepr::Dense(matrix),
            log_det,
        }
    }

    /// `τ I − τ² Bᵀ (a I + τ B Bᵀ)⁻¹ B`, i.e. `(I/τ + Bᵀ B / a)⁻¹`.
    pub(crate) fn woodbury(scale: T, shift: T, basis: DMatrix<T>) -> Result<Self> {
        let (k, dim) = basis.shape();
        let (eigenvectors, eigenvalues) = if k == 0 {
            (DMatrix::zeros(0, 0), DVector::zeros(0))
        } else {
            let eig = (&basis * basis.transpose()).symmetric_eigen();
            (eig.eigenvectors, eig.eigenvalues.map(|l| l.max(T::zero())))
        };
        if eigenvalues.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("feature Gram eigenvalues"));
        }
        let rotated = eigenvectors.transpose() * &basis;
        let log_det = lit::<T>(dim as f64) * scale.ln()
            - eigenvalues
                .iter()
                .fold(T::zero(), |acc, &l| acc + (scale * l / shift).ln_1p());
        Ok(Self {
            dim,
            repr: SpdRepr::Woodbury {
                scale,
                shift,
                basis,
                eigenvectors,
                eigenvalues,
                rotated,
            },
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_det(&self) -> T {
        self.log_det
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.repr, SpdRepr::Dense(_))
    }

    pub fn trace(&self) -> T {
        match &self.repr {
            SpdRepr::Dense(m) => m.trace(),
            SpdRepr::Woodbury {
                scale,
                shift,
                eigenvalues,
                ..
            } => {
                // τ (R − k) + τ Σ a / (a + τ λ_i)
                let k = eigenvalues.len();
                let kept = eigenvalues
                    .iter()
                    .fold(T::zero(), |acc, &l| acc + *shift / (*shift + *scale * l));
                *scale * (lit::<T>((self.dim - k) as f64) + kept)
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        match &self.repr {
            SpdRepr::Dense(m) => m.clone(),
            SpdRepr::Woodbury { scale, rotated, .. } => {
                let weighted = self.weighted_rotated();
                let mut m = -(rotated.transpose() * weighted) * (*scale * *scale);
                for i in 0..self.dim {
                    m[(i, i)] += *scale;
                }
                m
            }
        }
    }

    /// `D Uᵀ B` with `D = diag(1 / (a + τ λ))`.
    fn weighted_rotated(&self) -> DMatrix<T> {
        match &self.repr {
            SpdRepr::Dense(_) => unreachable!("only used for the Woodbury form"),
            SpdRepr::Woodbury {
                scale,
                shift,
                eigenvalues,
                rotated,
                ..
            } => {
                let mut out = rotated.clone();
                for (i, &l) in eigenvalues.iter().enumerate() {
                    let d = T::one() / (*shift + *scale * l);
                    out.row_mut(i).scale_mut(d);
                }
                out
            }
        }
    }

    /// `X Σ` through the Woodbury form, with no use of the basis.
    fn woodbury_left_mul(&self, x: &DMatrix<T>) -> DMatrix<T> {
        match &self.repr {
            SpdRepr::Dense(m) => x * m,
            SpdRepr::Woodbury { scale, rotated, .. } => {
                let weighted = self.weighted_rotated();
                x * *scale - (x * rotated.transpose()) * weighted * (*scale * *scale)
            }
        }
    }

    /// `Φ Σ` for an N×R matrix Φ.
    ///
    /// When Φ has the basis shape this uses `Φ Σ = (Φ − B) Σ + a τ C⁻¹ B`,
    /// which avoids the cancellation in `τ Φ − τ² Φ Bᵀ C⁻¹ B` when `a` is tiny.
    pub fn left_mul(&self, phi: &DMatrix<T>) -> DMatrix<T> {
        match &self.repr {
            SpdRepr::Woodbury {
                scale,
                shift,
                basis,
                eigenvectors,
                ..
            } if basis.nrows() > 0 && basis.shape() == phi.shape() => {
                let anchored = eigenvectors * self.weighted_rotated() * (*shift * *scale);
                if phi == basis {
                    return anchored;
                }
                self.woodbury_left_mul(&(phi - basis)) + anchored
            }
            _ => self.woodbury_left_mul(phi),
        }
    }

    /// `tr(Φ Σ Φᵀ)`.
    pub fn feature_trace(&self, phi: &DMatrix<T>) -> T {
        match &self.repr {
            SpdRepr::Woodbury {
                scale,
                shift,
                basis,
                eigenvectors,
                eigenvalues,
                ..
            } if basis.nrows() > 0 && basis.shape() == phi.shape() => {
                // ⟨ΔΣ, Φ⟩ + a τ ⟨C⁻¹B, Δ⟩ + a τ Σ λ_i / (a + τ λ_i)
                let at = *shift * *scale;
                let base = eigenvalues
                    .iter()
                    .fold(T::zero(), |acc, &l| acc + l / (*shift + *scale * l));
                if phi == basis {
                    return at * base;
                }
                let delta = phi - basis;
                let anchored = eigenvectors * self.weighted_rotated();
                crate::linalg::frobenius_dot(&self.woodbury_left_mul(&delta), phi)
                    + at * crate::linalg::frobenius_dot(&anchored, &delta)
                    + at * base
            }
            SpdRepr::Dense(m) => crate::linalg::frobenius_dot(&(phi * m), phi),
            SpdRepr::Woodbury { scale, .. } => {
                let weighted = self.weighted_rotated();
                let SpdRepr::Woodbury { rotated, .. } = &self.repr else {
                    unreachable!()
                };
                let cross = phi * rotated.transpose();
                *scale * frobenius_sq(phi)
                    - crate::linalg::frobenius_dot(&(&cross * weighted), &(phi * (*scale * *scale)))
            }
        }
    }

    /// `xᵀ Σ x`.
    pub fn quad_form(&self, x: &DVector<T>) -> T {
        match &self.repr {
            SpdRepr::Dense(m) => x.dot(&(m * x)),
            SpdRepr::Woodbury {
                scale,
                shift,
                eigenvalues,
                rotated,
                ..
            } => {
                let gx = rotated * x;
                let reduction = gx
                    .iter()
                    .zip(eigenvalues.iter())
                    .fold(T::zero(), |acc, (&g, &l)| {
                        acc + g * g / (*shift + *scale * l)
                    });
                *scale * x.norm_squared() - *scale * *scale * reduction
            }
        }
    }
}

/// Covariance of `q(w)` in one of the three supported families.
#[derive(Clone, Debug)]
pub enum Covariance<T: Real> {
    /// Per-coordinate variances `σ²_{q,r}`.
    Diagonal(DVector<T>),
    /// `v vᵀ + ε I` with a fixed jitter `ε`.
    RankOne {
        direction: DVector<T>,
        jitter: T,
    },
    FullRank(SpdCovariance<T>),
}

/// Gaussian approximate posterior `q(w) = N(μ_q, Σ_q)`.
#[derive(Clone, Debug)]
pub struct GaussianPosterior<T: Real> {
    mean: DVector<T>,
    covariance: Covariance<T>,
}

impl<T: Real> GaussianPosterior<T> {
    pub fn diagonal(mean: DVector<T>, variances: DVector<T>) -> Result<Self> {
        check_dim("diagonal variances", mean.len(), variances.len())?;
        if variances.iter().any(|&s| !(s > T::zero() && s.is_finite())) {
            return Err(Error::InvalidArgument(
                "diagonal variances must be positive and finite".into(),
            ));
        }
        Self::checked(mean, Covariance::Diagonal(variances))
    }

    pub fn rank_one(mean: DVector<T>, direction: DVector<T>, jitter: T) -> Result<Self> {
        check_dim("rank-1 direction", mean.len(), direction.len())?;
        if !(jitter > T::zero() && jitter.is_finite()) {
            return Err(Error::InvalidArgument(
                "rank-1 jitter must be positive".into(),
            ));
        }
        Self::checked(mean, Covariance::RankOne { direction, jitter })
    }

    pub fn full_rank(mean: DVector<T>, covariance: SpdCovariance<T>) -> Result<Self> {
        check_dim("full covariance", mean.len(), covariance.dim())?;
        Self::checked(mean, Covariance::FullRank(covariance))
    }

    fn checked(mean: DVector<T>, covariance: Covariance<T>) -> Result<Self> {
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior mean"));
        }
        if let Covariance::RankOne { direction, .. } = &covariance {
            if direction.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("rank-1 direction"));
            }
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance<T> {
        &self.covariance
    }

    pub fn structure(&self) -> Structure {
        match self.covariance {
            Covariance::Diagonal(_) => Structure::Diagonal,
            Covariance::RankOne { .. } => Structure::RankOne,
            Covariance::FullRank(_) => Structure::FullRank,
        }
    }

    pub fn with_mean(mut self, mean: DVector<T>) -> Result<Self> {
        check_dim("posterior mean", self.dim(), mean.len())?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior mean"));
        }
        self.mean = mean;
        Ok(self)
    }

    /// The rank-1 direction `v_q`, if this is a rank-1 posterior.
    pub fn rank_one_direction(&self) -> Option<(&DVector<T>, T)> {
        match &self.covariance {
            Covariance::RankOne { direction, jitter } => Some((direction, *jitter)),
            _ => None,
        }
    }

    /// `tr(Σ_q)`.
    pub fn covariance_trace(&self) -> T {
        match &self.covariance {
            Covariance::Diagonal(d) => d.sum(),
            Covariance::RankOne { direction, jitter } => {
                direction.norm_squared() + lit::<T>(self.dim() as f64) * *jitter
            }
            Covariance::FullRank(s) => s.trace(),
        }
    }

    /// `log det Σ_q`; for rank-1 uses `(R−1) log ε + log(‖v‖² + ε)`.
    pub fn log_det_covariance(&self) -> T {
        match &self.covariance {
            Covariance::Diagonal(d) => d.iter().fold(T::zero(), |acc, &s| acc + s.ln()),
            Covariance::RankOne { direction, jitter } => {
                lit::<T>(self.dim() as f64 - 1.0) * jitter.ln()
                    + (direction.norm_squared() + *jitter).ln()
            }
            Covariance::FullRank(s) => s.log_det(),
        }
    }

    /// `tr(Φ Σ_q Φᵀ)` specialised per structure.
    pub fn feature_trace(&self, phi: &DMatrix<T>) -> T {
        match &self.covariance {
            Covariance::Diagonal(d) => column_norms_sq(phi).dot(d),
            Covariance::RankOne { direction, jitter } => {
                (phi * direction).norm_squared() + *jitter * frobenius_sq(phi)
            }
            Covariance::FullRank(s) => s.feature_trace(phi),
        }
    }

    /// `Φ Σ_q` (N×R).
    pub fn feature_covariance(&self, phi: &DMatrix<T>) -> DMatrix<T> {
        match &self.covariance {
            Covariance::Diagonal(d) => {
                let mut out = phi.clone();
                for (mut col, &s) in out.column_iter_mut().zip(d.iter()) {
                    col *= s;
                }
                out
            }
            Covariance::RankOne { direction, jitter } => {
                (phi * direction) * direction.transpose() + phi * *jitter
            }
            Covariance::FullRank(s) => s.left_mul(phi),
        }
    }

    /// `xᵀ Σ_q x`.
    pub fn quad_form(&self, x: &DVector<T>) -> T {
        match &self.covariance {
            Covariance::Diagonal(d) => x
                .iter()
                .zip(d.iter())
                .fold(T::zero(), |acc, (&xi, &s)| acc + xi * xi * s),
            Covariance::RankOne { direction, jitter } => {
                let p = direction.dot(x);
                p * p + *jitter * x.norm_squared()
            }
            Covariance::FullRank(s) => s.quad_form(x),
        }
    }

    /// Materialised R×R covariance. Intended for small R.
    pub fn dense_covariance(&self) -> DMatrix<T> {
        match &self.covariance {
            Covariance::Diagonal(d) => DMatrix::from_diagonal(d),
            Covariance::RankOne { direction, jitter } => {
                let mut m = direction * direction.transpose();
                for i in 0..self.dim() {
                    m[(i, i)] += *jitter;
                }
                m
            }
            Covariance::FullRank(s) => s.to_dense(),
        }
    }
}
