//! Closed-form (tempered) ELBO, coordinate-ascent updates and the rank-1
//! collapse diagnostics.
//!
//! With `a = T σ_y²` the tempered objective is
//!
//! ```text
//! J = (1/T) E_q[log p(y | w)] − KL(q ‖ N(0, τ I))
//! ```
//!
//! and every block update below is the exact maximiser of `J` in that block.

mod posterior;

pub use posterior::{Covariance, GaussianPosterior, SpdCovariance, Structure};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{column_norms_sq, SpdFactor};
use crate::model::Hyperparameters;
use crate::scalar::{lit, Real};

/// Default rank-1 jitter ε.
pub const DEFAULT_RANK_ONE_JITTER: f64 = 1e-6;

fn check_shapes<T: Real>(q: &GaussianPosterior<T>, phi: &DMatrix<T>, y: &DVector<T>) -> Result<()> {
    check_dim("design matrix columns vs posterior", q.dim(), phi.ncols())?;
    check_dim("design matrix rows vs targets", phi.nrows(), y.len())
}

fn positive<T: Real>(name: &str, v: T) -> Result<()> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must be positive (got {v})"
        )))
    }
}

/// `E_q[log N(y | Φw, σ_y² I)]`.
pub fn expected_log_likelihood<T: Real>(
    q: &GaussianPosterior<T>,
    phi: &DMatrix<T>,
    y: &DVector<T>,
    noise_variance: T,
) -> Result<T> {
    check_shapes(q, phi, y)?;
    positive("noise variance", noise_variance)?;
    let n = lit::<T>(y.len() as f64);
    let residual = y - phi * q.mean();
    let spread = residual.norm_squared() + q.feature_trace(phi);
    Ok(-lit::<T>(0.5) * (n * (T::two_pi() * noise_variance).ln() + spread / noise_variance))
}

/// `KL(q ‖ N(0, τ I))`.
pub fn kl_to_prior<T: Real>(q: &GaussianPosterior<T>, prior_scale: T) -> Result<T> {
    positive("prior scale", prior_scale)?;
    let r = lit::<T>(q.dim() as f64);
    let second_moment = q.covariance_trace() + q.mean().norm_squared();
    Ok(lit::<T>(0.5)
        * (second_moment / prior_scale - r + r * prior_scale.ln() - q.log_det_covariance()))
}

/// Tempered ELBO `(1/T) E_q[log p(y|w)] − KL(q ‖ p)`.
pub fn elbo<T: Real>(
    q: &GaussianPosterior<T>,
    phi: &DMatrix<T>,
    y: &DVector<T>,
    h: &Hyperparameters<T>,
) -> Result<T> {
    h.validate()?;
    let ell = expected_log_likelihood(q, phi, y, h.noise_variance)?;
    let kl = kl_to_prior(q, h.prior_scale)?;
    Ok(ell / h.temperature - kl)
}

/// Ridge solution `(ΦᵀΦ/a + I/τ)⁻¹ Φᵀ y / a` with `a = T σ_y²`.
///
/// Solved in the N×N dual form `τ Φᵀ (a I + τ Φ Φᵀ)⁻¹ y` when `R > N`.
pub fn update_mean<T: Real>(
    phi: &DMatrix<T>,
    y: &DVector<T>,
    noise_variance: T,
    prior_scale: T,
    temperature: T,
) -> Result<DVector<T>> {
    check_dim("design matrix rows vs targets", phi.nrows(), y.len())?;
    positive("noise variance", noise_variance)?;
    positive("prior scale", prior_scale)?;
    positive("temperature", temperature)?;
    let a = temperature * noise_variance;
    let (n, r) = phi.shape();
    if r > n {
        // Eigenbasis of Φ Φᵀ keeps the solve accurate as a → 0.
        let eig = (phi * phi.transpose()).symmetric_eigen();
        let mut coef = eig.eigenvectors.tr_mul(y);
        for (c, &l) in coef.iter_mut().zip(eig.eigenvalues.iter()) {
            *c /= a + prior_scale * l.max(T::zero());
        }
        Ok(phi.tr_mul(&(&eig.eigenvectors * coef)) * prior_scale)
    } else {
        let factor = SpdFactor::new(primal_precision(phi, a, prior_scale))?;
        Ok(factor.solve_vec(&(phi.tr_mul(y) / a)))
    }
}

fn primal_precision<T: Real>(phi: &DMatrix<T>, a: T, prior_scale: T) -> DMatrix<T> {
    let mut p = phi.tr_mul(phi) / a;
    let inv_tau = T::one() / prior_scale;
    for i in 0..p.nrows() {
        p[(i, i)] += inv_tau;
    }
    p
}

/// `σ²_{q,r} = 1 / (1/τ + ‖φ_r‖² / (T σ_y²))`.
pub fn update_diagonal_variances<T: Real>(
    phi: &DMatrix<T>,
    noise_variance: T,
    prior_scale: T,
    temperature: T,
) -> Result<DVector<T>> {
    positive("noise variance", noise_variance)?;
    positive("prior scale", prior_scale)?;
    positive("temperature", temperature)?;
    let a = temperature * noise_variance;
    let inv_tau = T::one() / prior_scale;
    Ok(column_norms_sq(phi).map(|c| T::one() / (inv_tau + c / a)))
}

/// `Σ_q = (ΦᵀΦ/(T σ_y²) + I/τ)⁻¹`.
///
/// For `R > N` the result is kept in the Woodbury form
/// `τ I − τ² Φᵀ (a I + τ Φ Φᵀ)⁻¹ Φ`, otherwise it is dense.
pub fn update_full_covariance<T: Real>(
    phi: &DMatrix<T>,
    noise_variance: T,
    prior_scale: T,
    temperature: T,
) -> Result<SpdCovariance<T>> {
    positive("noise variance", noise_variance)?;
    positive("prior scale", prior_scale)?;
    positive("temperature", temperature)?;
    let a = temperature * noise_variance;
    let (n, r) = phi.shape();
    if r > n {
        SpdCovariance::woodbury(prior_scale, a, phi.clone())
    } else {
        let factor = SpdFactor::new(primal_precision(phi, a, prior_scale))?;
        Ok(SpdCovariance::dense_with_log_det(
            factor.inverse(),
            -factor.log_det(),
        ))
    }
}

/// `σ_y² = (‖y − Φ μ_q‖² + tr(Φ Σ_q Φᵀ)) / N`. Independent of the temperature.
pub fn update_noise_variance<T: Real>(
    q: &GaussianPosterior<T>,
    phi: &DMatrix<T>,
    y: &DVector<T>,
) -> Result<T> {
    check_shapes(q, phi, y)?;
    let residual = y - phi * q.mean();
    let value = (residual.norm_squared() + q.feature_trace(phi)) / lit::<T>(y.len() as f64);
    if !value.is_finite() {
        return Err(Error::NonFinite("noise variance update"));
    }
    if value <= T::zero() {
        return Err(Error::NoiseVarianceUnderflow);
    }
    Ok(value)
}

/// `τ = (tr(Σ_q) + ‖μ_q‖²) / R`, the stationary point of the KL term in τ.
pub fn update_prior_scale<T: Real>(q: &GaussianPosterior<T>) -> T {
    (q.covariance_trace() + q.mean().norm_squared()) / lit::<T>(q.dim() as f64)
}

/// `∂J/∂ log τ = ½ [(tr Σ_q + ‖μ_q‖²)/τ − R]`.
pub fn elbo_grad_log_prior_scale<T: Real>(q: &GaussianPosterior<T>, prior_scale: T) -> T {
    let r = lit::<T>(q.dim() as f64);
    lit::<T>(0.5) * ((q.covariance_trace() + q.mean().norm_squared()) / prior_scale - r)
}

/// `∂J/∂Φ = [(y − Φ μ_q) μ_qᵀ − Φ Σ_q] / (T σ_y²)` at fixed q.
pub fn elbo_grad_features<T: Real>(
    q: &GaussianPosterior<T>,
    phi: &DMatrix<T>,
    y: &DVector<T>,
    h: &Hyperparameters<T>,
) -> Result<DMatrix<T>> {
    check_shapes(q, phi, y)?;
    let a = h.temperature * h.noise_variance;
    let residual = y - phi * q.mean();
    Ok((residual * q.mean().transpose() - q.feature_covariance(phi)) / a)
}

/// Gradient of the rank-1 ELBO in `v_q` for general τ and T:
/// `−ΦᵀΦ v/(T σ_y²) − v/τ + v/(‖v‖² + ε)`.
pub fn grad_v_tempered<T: Real>(
    direction: &DVector<T>,
    phi: &DMatrix<T>,
    noise_variance: T,
    prior_scale: T,
    temperature: T,
    jitter: T,
) -> Result<DVector<T>> {
    check_dim("rank-1 direction vs features", phi.ncols(), direction.len())?;
    positive("noise variance", noise_variance)?;
    positive("prior scale", prior_scale)?;
    positive("temperature", temperature)?;
    positive("jitter", jitter)?;
    let data = phi.tr_mul(&(phi * direction)) / (temperature * noise_variance);
    let entropy = T::one() / (direction.norm_squared() + jitter);
    let shrink = T::one() / prior_scale;
    Ok(direction * (entropy - shrink) - data)
}

/// Rank-1 gradient at τ = T = 1: `−ΦᵀΦ v/σ_y² − v + v/(‖v‖² + ε)`.
pub fn grad_v<T: Real>(
    direction: &DVector<T>,
    phi: &DMatrix<T>,
    noise_variance: T,
    jitter: T,
) -> Result<DVector<T>> {
    grad_v_tempered(direction, phi, noise_variance, T::one(), T::one(), jitter)
}

/// Exact maximiser of the rank-1 ELBO in `v_q`.
///
/// The objective in `v` is `−½ vᵀ M v + ½ log(‖v‖² + ε)` with
/// `M = ΦᵀΦ/(T σ_y²) + I/τ`, so the optimum lies along an eigenvector of the
/// smallest eigenvalue `λ` of `M` with `‖v‖² = 1/λ − ε` (or `v = 0` when that
/// is not positive). When Φ has a null space, `λ = 1/τ` and the returned
/// direction is the null-space component nearest the current `v`.
pub fn optimal_rank_one_direction<T: Real>(
    current: &DVector<T>,
    phi: &DMatrix<T>,
    noise_variance: T,
    prior_scale: T,
    temperature: T,
    jitter: T,
) -> Result<DVector<T>> {
    check_dim("rank-1 direction vs features", phi.ncols(), current.len())?;
    positive("noise variance", noise_variance)?;
    positive("prior scale", prior_scale)?;
    positive("temperature", temperature)?;
    positive("jitter", jitter)?;
    let (n, r) = phi.shape();
    let a = temperature * noise_variance;
    let (unit, smallest) = if r > n {
        let q = phi.transpose().qr().q();
        let unit = null_space_component(current, &q)
            .or_else(|| {
                (0..r).find_map(|i| {
                    let e = DVector::from_fn(r, |j, _| if i == j { T::one() } else { T::zero() });
                    null_space_component(&e, &q)
                })
            })
            .ok_or(Error::NonFinite("rank-1 null-space projection"))?;
        (unit, T::one() / prior_scale)
    } else {
        let svd = phi.clone().svd(false, true);
        let v_t = svd.v_t.ok_or(Error::NonFinite("rank-1 direction SVD"))?;
        let (idx, s) = svd.singular_values.iter().enumerate().fold(
            (0, T::max_value().unwrap_or(T::one() / T::tiny())),
            |best, (i, &s)| {
                if s < best.1 {
                    (i, s)
                } else {
                    best
                }
            },
        );
        let mut unit = v_t.row(idx).transpose();
        if unit.dot(current) < T::zero() {
            unit = -unit;
        }
        (unit, s * s / a + T::one() / prior_scale)
    };
    let norm_sq = T::one() / smallest - jitter;
    if norm_sq > T::zero() {
        Ok(unit * norm_sq.sqrt())
    } else {
        Ok(DVector::zeros(r))
    }
}

/// Unit vector along `v − Q Qᵀ v`, or `None` when that residual is negligible.
fn null_space_component<T: Real>(v: &DVector<T>, q: &DMatrix<T>) -> Option<DVector<T>> {
    let norm = v.norm();
    if !(norm > T::zero()) {
        return None;
    }
    let mut u = v - q * q.tr_mul(v);
    // Second pass restores orthogonality lost to cancellation.
    u -= q * q.tr_mul(&u);
    let un = u.norm();
    (un > lit::<T>(1e-8) * norm).then(|| u / un)
}

/// How far a rank-1 direction is from the null-space optimum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseDiagnostics<T> {
    /// `‖Φ v‖ / ‖v‖`; zero when `v` lies in the null space of Φ.
    pub alignment: T,
    /// `‖v‖² − (1 − ε)`.
    pub norm_gap: T,
}

pub fn collapse_diagnostics<T: Real>(
    direction: &DVector<T>,
    phi: &DMatrix<T>,
    jitter: T,
) -> Result<CollapseDiagnostics<T>> {
    check_dim("rank-1 direction vs features", phi.ncols(), direction.len())?;
    let norm = direction.norm();
    Ok(CollapseDiagnostics {
        alignment: (phi * direction).norm() / norm.max(T::tiny()),
        norm_gap: norm * norm - (T::one() - jitter),
    })
}

/// `−½ [N log(2π σ_y²) + ‖y − Φ μ‖²/σ_y² + ‖μ‖²]`, the objective the rank-1
/// ELBO reduces to (up to constants) once `v` sits in the null space of Φ.
pub fn degenerate_map_objective<T: Real>(
    mean: &DVector<T>,
    phi: &DMatrix<T>,
    y: &DVector<T>,
    noise_variance: T,
) -> Result<T> {
    check_dim("design matrix columns vs mean", phi.ncols(), mean.len())?;
    check_dim("design matrix rows vs targets", phi.nrows(), y.len())?;
    positive("noise variance", noise_variance)?;
    let n = lit::<T>(y.len() as f64);
    let residual = y - phi * mean;
    Ok(-lit::<T>(0.5)
        * (n * (T::two_pi() * noise_variance).ln()
            + residual.norm_squared() / noise_variance
            + mean.norm_squared()))
}

#[cfg(test)]
mod tests;
