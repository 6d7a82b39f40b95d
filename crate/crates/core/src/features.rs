//! Random Fourier features for the RBF kernel.
//!
//! A map is defined by a seed, the input dimension `D` and the feature count
//! `R`. The projection `A` (D×R, standard normal) and phases `b` (uniform on
//! `[0, 2π)`) are drawn once and never change; the kernel lengthscale and
//! outputscale are applied at evaluation time so the same frozen map serves
//! every hyperparameter setting.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{lit, Real};

/// Version tag written into serialized feature maps.
pub const FEATURE_MAP_FORMAT_VERSION: u32 = 1;

const PROJECTION_STREAM: u64 = 0;
const PHASE_STREAM: u64 = 1;

/// RBF kernel hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    pub lengthscale: T,
    pub outputscale: T,
}

impl<T: Real> KernelParams<T> {
    pub fn new(lengthscale: T, outputscale: T) -> Result<Self> {
        if !(lengthscale > T::zero() && outputscale > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "kernel lengthscale and outputscale must be positive (got {lengthscale}, {outputscale})"
            )));
        }
        Ok(Self {
            lengthscale,
            outputscale,
        })
    }

    pub fn unit() -> Self {
        Self {
            lengthscale: T::one(),
            outputscale: T::one(),
        }
    }
}

/// Frozen random projection defining `φ(x) = σ_k √(2/R) cos(Aᵀx / ℓ_k + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RffFeatureMap<T: Real> {
    seed: Option<u64>,
    projection: DMatrix<T>,
    phases: DVector<T>,
}

/// Canonical serialized form: a map is regenerated from its seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMapBlob {
    pub version: u32,
    pub seed: u64,
    pub input_dim: usize,
    pub num_features: usize,
}

impl<T: Real> RffFeatureMap<T> {
    /// Draws a map. `A` and `b` come from separate ChaCha streams of the same
    /// seed, so each is reproducible regardless of how the other is consumed.
    pub fn sample(seed: u64, input_dim: usize, num_features: usize) -> Result<Self> {
        if input_dim == 0 || num_features == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map needs D >= 1 and R >= 1 (got D={input_dim}, R={num_features})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(PROJECTION_STREAM);
        // Column-major fill: column r holds the projection for feature r.
        let projection = DMatrix::from_iterator(
            input_dim,
            num_features,
            (0..input_dim * num_features).map(|_| lit::<T>(rng.sample::<f64, _>(StandardNormal))),
        );

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(PHASE_STREAM);
        let two_pi = T::two_pi();
        let phases = DVector::from_iterator(
            num_features,
            (0..num_features).map(|_| {
                let b = lit::<T>(rng.random::<f64>() * std::f64::consts::TAU);
                // Rounding can land exactly on 2π; wrap it.
                if b >= two_pi {
                    T::zero()
                } else {
                    b
                }
            }),
        );
        Ok(Self {
            seed: Some(seed),
            projection,
            phases,
        })
    }

    /// Builds a map from explicit weights (D×R) and phases (length R).
    pub fn from_parts(projection: DMatrix<T>, phases: DVector<T>) -> Result<Self> {
        check_dim("feature map phases", projection.ncols(), phases.len())?;
        if projection.nrows() == 0 || projection.ncols() == 0 {
            return Err(Error::InvalidArgument("empty feature map".into()));
        }
        let two_pi = T::two_pi();
        if phases.iter().any(|&b| !(b >= T::zero() && b < two_pi)) {
            return Err(Error::InvalidArgument("phases must lie in [0, 2π)".into()));
        }
        Ok(Self {
            seed: None,
            projection,
            phases,
        })
    }

    pub fn from_blob(blob: &FeatureMapBlob) -> Result<Self> {
        if blob.version != FEATURE_MAP_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported feature map version {}",
                blob.version
            )));
        }
        Self::sample(blob.seed, blob.input_dim, blob.num_features)
    }

    /// Seed-based description; `None` for maps built from explicit parts.
    pub fn to_blob(&self) -> Option<FeatureMapBlob> {
        self.seed.map(|seed| FeatureMapBlob {
            version: FEATURE_MAP_FORMAT_VERSION,
            seed,
            input_dim: self.input_dim(),
            num_features: self.num_features(),
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.projection.ncols()
    }

    /// The D×R projection `A`.
    pub fn projection(&self) -> &DMatrix<T> {
        &self.projection
    }

    /// The phase vector `b`.
    pub fn phases(&self) -> &DVector<T> {
        &self.phases
    }

    fn amplitude(&self, k: &KernelParams<T>) -> T {
        k.outputscale * (lit::<T>(2.0) / lit::<T>(self.num_features() as f64)).sqrt()
    }

    /// Pre-activation `aᵣᵀx / ℓ + bᵣ` for one input.
    fn phase_angles(&self, x: DVectorView<'_, T>, k: &KernelParams<T>) -> DVector<T> {
        let inv_ell = T::one() / k.lengthscale;
        let mut z = self.projection.tr_mul(&x);
        z.iter_mut()
            .zip(self.phases.iter())
            .for_each(|(zi, &b)| *zi = *zi * inv_ell + b);
        z
    }

    pub fn featurize(&self, x: &[T], k: &KernelParams<T>) -> Result<DVector<T>> {
        check_dim("featurize input", self.input_dim(), x.len())?;
        let amp = self.amplitude(k);
        let z = self.phase_angles(DVectorView::from_slice(x, x.len()), k);
        Ok(z.map(|zi| amp * zi.cos()))
    }

    /// Design matrix Φ (N×R); row i is `φ(x_i)ᵀ`.
    pub fn design_matrix(&self, inputs: &DMatrix<T>, k: &KernelParams<T>) -> Result<DMatrix<T>> {
        Ok(self
            .design_matrix_and_lengthscale_derivative(inputs, k, false)?
            .0)
    }

    /// Φ together with `∂Φ/∂log ℓ_k`. `∂Φ/∂log σ_k` is Φ itself.
    pub fn design_matrix_with_derivative(
        &self,
        inputs: &DMatrix<T>,
        k: &KernelParams<T>,
    ) -> Result<(DMatrix<T>, DMatrix<T>)> {
        let (phi, d) = self.design_matrix_and_lengthscale_derivative(inputs, k, true)?;
        Ok((phi, d.expect("derivative requested")))
    }

    fn design_matrix_and_lengthscale_derivative(
        &self,
        inputs: &DMatrix<T>,
        k: &KernelParams<T>,
        with_derivative: bool,
    ) -> Result<(DMatrix<T>, Option<DMatrix<T>>)> {
        check_dim(
            "design matrix input columns",
            self.input_dim(),
            inputs.ncols(),
        )?;
        let n = inputs.nrows();
        let r = self.num_features();
        let amp = self.amplitude(k);
        let inv_ell = T::one() / k.lengthscale;
        // projected[i, r] = x_iᵀ a_r / ℓ
        let projected = (inputs * &self.projection) * inv_ell;
        let mut phi = DMatrix::zeros(n, r);
        let mut dphi = with_derivative.then(|| DMatrix::zeros(n, r));
        // Column-major storage: entry (i, j) sits at j·n + i in every matrix.
        let b = self.phases.as_slice();
        let u = projected.as_slice();
        match dphi.as_mut() {
            Some(d) => {
                let out = phi
                    .as_mut_slice()
                    .iter_mut()
                    .zip(d.as_mut_slice().iter_mut());
                for (idx, (p, dp)) in out.enumerate() {
                    let (sin, cos) = (u[idx] + b[idx / n]).sin_cos();
                    *p = amp * cos;
                    // d/dlogℓ cos(u + b) with u ∝ 1/ℓ is sin(u + b) · u.
                    *dp = amp * sin * u[idx];
                }
            }
            None => {
                for (idx, p) in phi.as_mut_slice().iter_mut().enumerate() {
                    *p = amp * (u[idx] + b[idx / n]).cos();
                }
            }
        }
        Ok((phi, dphi))
    }
}

/// `σ_k² exp(−‖x − x′‖² / (2 ℓ_k²))`.
pub fn rbf_kernel<T: Real>(x: &[T], x_prime: &[T], k: &KernelParams<T>) -> Result<T> {
    check_dim("rbf kernel inputs", x.len(), x_prime.len())?;
    let sq = x
        .iter()
        .zip(x_prime)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    let ell2 = k.lengthscale * k.lengthscale;
    Ok(k.outputscale * k.outputscale * (-sq / (lit::<T>(2.0) * ell2)).exp())
}
