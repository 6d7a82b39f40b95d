//! Exact conjugate quantities for Bayesian linear regression with prior
//! `w ~ N(0, τ I)` and likelihood `y | w ~ N(Φ w, σ_y² I)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::{KernelParams, RffFeatureMap};
use crate::linalg::{frobenius_dot, SpdFactor};
use crate::scalar::{lit, Real};
use crate::vi::{GaussianPosterior, SpdCovariance};

/// Zero-mean isotropic prior `N(0, τ I_R)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior<T> {
    scale: T,
}

impl<T: Real> Prior<T> {
    pub fn new(scale: T) -> Result<Self> {
        if !(scale > T::zero() && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior scale must be positive (got {scale})"
            )));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn mean(&self, dim: usize) -> DVector<T> {
        DVector::zeros(dim)
    }
}

/// Hyperparameters η plus the tempering factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters<T> {
    /// Observation noise variance σ_y².
    pub noise_variance: T,
    /// Prior variance τ.
    pub prior_scale: T,
    pub kernel: KernelParams<T>,
    /// Temperature T; the expected log-likelihood is divided by it.
    pub temperature: T,
}

impl<T: Real> Hyperparameters<T> {
    pub fn new(
        noise_variance: T,
        prior_scale: T,
        kernel: KernelParams<T>,
        temperature: T,
    ) -> Result<Self> {
        let h = Self {
            noise_variance,
            prior_scale,
            kernel,
            temperature,
        };
        h.validate()?;
        Ok(h)
    }

    /// σ_y² = τ = ℓ_k = σ_k = T = 1.
    pub fn unit() -> Self {
        Self {
            noise_variance: T::one(),
            prior_scale: T::one(),
            kernel: KernelParams::unit(),
            temperature: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.noise_variance,
            self.prior_scale,
            self.kernel.lengthscale,
            self.kernel.outputscale,
            self.temperature,
        ];
        if all.iter().all(|&v| v > T::zero() && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "hyperparameters must be positive and finite: {self:?}"
            )))
        }
    }

    pub fn prior(&self) -> Prior<T> {
        Prior {
            scale: self.prior_scale,
        }
    }
}

/// Training inputs (N×D) and targets (N).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Real> {
    inputs: DMatrix<T>,
    targets: DVector<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(inputs: DMatrix<T>, targets: DVector<T>) -> Result<Self> {
        check_dim("dataset rows", inputs.nrows(), targets.len())?;
        if targets.is_empty() {
            return Err(Error::InvalidArgument(
                "dataset needs at least one sample".into(),
            ));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Self { inputs, targets })
    }

    /// Dataset with scalar inputs.
    pub fn from_scalar(xs: &[T], ys: &[T]) -> Result<Self> {
        Self::new(
            DMatrix::from_column_slice(xs.len(), 1, xs),
            DVector::from_column_slice(ys),
        )
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<T> {
        &self.inputs
    }

    pub fn targets(&self) -> &DVector<T> {
        &self.targets
    }
}

/// Exact posterior `N(μ*, Σ*)` in the R×R primal form.
#[derive(Clone, Debug)]
pub struct ExactPosterior<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
    /// Jitter the factorization needed (zero when none).
    pub jitter: T,
    log_det: T,
}

impl<T: Real> ExactPosterior<T> {
    /// The exact posterior as a full-rank variational posterior.
    pub fn to_variational(&self) -> Result<GaussianPosterior<T>> {
        GaussianPosterior::full_rank(
            self.mean.clone(),
            SpdCovariance::dense_with_log_det(self.covariance.clone(), self.log_det),
        )
    }
}

fn check_regression<T: Real>(phi: &DMatrix<T>, y: &DVector<T>) -> Result<()> {
    check_dim("design matrix rows vs targets", phi.nrows(), y.len())?;
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix"));
    }
    Ok(())
}

/// `Σ* = (I/τ + ΦᵀΦ/σ_y²)⁻¹`, `μ* = Σ* Φᵀ y / σ_y²`. Temperature is ignored.
pub fn exact_posterior<T: Real>(
    phi: &DMatrix<T>,
    y: &DVector<T>,
    h: &Hyperparameters<T>,
) -> Result<ExactPosterior<T>> {
    check_regression(phi, y)?;
    h.validate()?;
    let r = phi.ncols();
    let inv_noise = T::one() / h.noise_variance;
    let mut precision = phi.tr_mul(phi) * inv_noise;
    let inv_tau = T::one() / h.prior_scale;
    for i in 0..r {
        precision[(i, i)] += inv_tau;
    }
    let factor = SpdFactor::new(precision)?;
    let covariance = factor.inverse();
    let mean = factor.solve_vec(&(phi.tr_mul(y) * inv_noise));
    Ok(ExactPosterior {
        mean,
        covariance,
        jitter: factor.jitter(),
        log_det: -factor.log_det(),
    })
}

/// `log N(y | 0, σ_y² I + τ Φ Φᵀ)` via the N×N factorization.
pub fn log_marginal_likelihood<T: Real>(
    phi: &DMatrix<T>,
    y: &DVector<T>,
    h: &Hyperparameters<T>,
) -> Result<T> {
    check_regression(phi, y)?;
    h.validate()?;
    let factor = SpdFactor::new(marginal_covariance(phi, h))?;
    let z = factor.whiten(y);
    let n = lit::<T>(y.len() as f64);
    let half = lit::<T>(0.5);
    Ok(-half * (z.norm_squared() + factor.log_det() + n * T::two_pi().ln()))
}

fn marginal_covariance<T: Real>(phi: &DMatrix<T>, h: &Hyperparameters<T>) -> DMatrix<T> {
    let mut c = (phi * phi.transpose()) * h.prior_scale;
    for i in 0..c.nrows() {
        c[(i, i)] += h.noise_variance;
    }
    c
}

/// LML and its gradient with respect to the log-scale noise and prior
/// variances and to the design matrix.
#[derive(Clone, Debug)]
pub struct LmlGradient<T: Real> {
    pub value: T,
    /// ∂/∂ log σ_y².
    pub d_log_noise_variance: T,
    /// ∂/∂ log τ.
    pub d_log_prior_scale: T,
    /// ∂/∂Φ (N×R).
    pub d_features: DMatrix<T>,
}

pub fn log_marginal_likelihood_gradient<T: Real>(
    phi: &DMatrix<T>,
    y: &DVector<T>,
    h: &Hyperparameters<T>,
) -> Result<LmlGradient<T>> {
    check_regression(phi, y)?;
    h.validate()?;
    let factor = SpdFactor::new(marginal_covariance(phi, h))?;
    let half = lit::<T>(0.5);
    let alpha = factor.solve_vec(y);
    let z = factor.whiten(y);
    let n = lit::<T>(y.len() as f64);
    let value = -half * (z.norm_squared() + factor.log_det() + n * T::two_pi().ln());
    // W = α αᵀ − C⁻¹ so that dL = ½ tr(W dC).
    let w = &alpha * alpha.transpose() - factor.inverse();
    let gram = phi * phi.transpose();
    Ok(LmlGradient {
        value,
        d_log_noise_variance: half * h.noise_variance * w.trace(),
        d_log_prior_scale: half * h.prior_scale * frobenius_dot(&w, &gram),
        d_features: (&w * phi) * h.prior_scale,
    })
}

/// Predictive mean and variance of `y*` at one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Predictive<T> {
    pub mean: T,
    pub variance: T,
}

/// Mean `φ(x*)ᵀ μ_q` and variance `φ(x*)ᵀ Σ_q φ(x*) + σ_y²`.
pub fn predictive_posterior<T: Real>(
    q: &GaussianPosterior<T>,
    map: &RffFeatureMap<T>,
    kernel: &KernelParams<T>,
    x: &[T],
    noise_variance: T,
) -> Result<Predictive<T>> {
    check_dim("posterior vs feature count", map.num_features(), q.dim())?;
    if !(noise_variance > T::zero()) {
        return Err(Error::InvalidArgument(
            "noise variance must be positive".into(),
        ));
    }
    let phi = map.featurize(x, kernel)?;
    Ok(Predictive {
        mean: phi.dot(q.mean()),
        variance: q.quad_form(&phi) + noise_variance,
    })
}
