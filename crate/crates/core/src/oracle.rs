//! Brute-force reference computations used to validate the closed forms.
//!
//! Everything here works in `f64` on dense matrices with LU-based algebra and
//! never calls the routines it is meant to check.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::features::KernelParams;
use crate::model::Hyperparameters;
use crate::vi::{Covariance, GaussianPosterior};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Samples drawn per independent substream.
const CHUNK: usize = 4096;

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

impl McEstimate {
    /// Whether `value` lies within `k` standard errors of the estimate.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (value - self.mean).abs() <= k * self.stderr
    }
}

/// Which parts of the ELBO are sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McMode {
    /// Sample `log p(y|w)`; the KL comes from [`dense_gaussian_kl`].
    Likelihood,
    /// Sample `log p(y|w) + log p(w) − log q(w)` in full.
    Full,
}

enum Sampler {
    Diagonal(DVector<f64>),
    RankOne {
        direction: DVector<f64>,
        jitter: f64,
    },
    Dense(DMatrix<f64>),
}

impl Sampler {
    fn new(q: &GaussianPosterior<f64>) -> Result<Self> {
        Ok(match q.covariance() {
            Covariance::Diagonal(d) => Sampler::Diagonal(d.map(f64::sqrt)),
            Covariance::RankOne { direction, jitter } => Sampler::RankOne {
                direction: direction.clone(),
                jitter: *jitter,
            },
            Covariance::FullRank(s) => {
                let chol = s.to_dense().cholesky().ok_or(Error::NotPositiveDefinite {
                    size: s.dim(),
                    max_jitter: 0.0,
                })?;
                Sampler::Dense(chol.l())
            }
        })
    }

    fn draw(&self, mean: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let r = mean.len();
        let xi = DVector::from_iterator(r, (0..r).map(|_| StandardNormal.sample(rng)));
        match self {
            Sampler::Diagonal(sd) => mean + sd.component_mul(&xi),
            Sampler::RankOne { direction, jitter } => {
                let zeta: f64 = StandardNormal.sample(rng);
                mean + direction * zeta + xi * jitter.sqrt()
            }
            Sampler::Dense(l) => mean + l * xi,
        }
    }
}

fn gaussian_log_likelihood(y: &DVector<f64>, fitted: &DVector<f64>, noise_variance: f64) -> f64 {
    let n = y.len() as f64;
    let sq: f64 = y
        .iter()
        .zip(fitted.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    -0.5 * (n * (LN_2PI + noise_variance.ln()) + sq / noise_variance)
}

/// Monte-Carlo tempered ELBO. Rank-1 posteriors are sampled as
/// `μ + ζ v + √ε ξ`; other structures through their covariance.
pub fn mc_elbo(
    q: &GaussianPosterior<f64>,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &Hyperparameters<f64>,
    samples: usize,
    seed: u64,
    mode: McMode,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "at least one sample is required".into(),
        ));
    }
    check_dim("design matrix columns vs posterior", q.dim(), phi.ncols())?;
    check_dim("design matrix rows vs targets", phi.nrows(), y.len())?;
    h.validate()?;
    let sampler = Sampler::new(q)?;
    let mean = q.mean();
    let r = q.dim();
    let cov = q.dense_covariance();
    let prior_cov = DMatrix::identity(r, r) * h.prior_scale;
    let zero = DVector::zeros(r);
    let (kl, q_density) = match mode {
        McMode::Likelihood => (dense_gaussian_kl(mean, &cov, &zero, &prior_cov)?, None),
        McMode::Full => (0.0, Some(DenseGaussian::new(mean.clone(), cov)?)),
    };
    let prior_density = DenseGaussian::new(zero, prior_cov)?;

    let chunks = samples.div_ceil(CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(samples - c * CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let w = sampler.draw(mean, &mut rng);
                let mut value =
                    gaussian_log_likelihood(y, &(phi * &w), h.noise_variance) / h.temperature;
                if let Some(qd) = &q_density {
                    value += prior_density.log_density(&w) - qd.log_density(&w);
                }
                s += value;
                s2 += value * value;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = partial
        .iter()
        .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let n = samples as f64;
    let avg = s / n;
    let var = if samples > 1 {
        ((s2 - n * avg * avg) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean: avg - kl,
        stderr: (var / n).sqrt(),
        samples,
        seed,
    })
}

/// Dense Gaussian with an LU-factored covariance.
pub struct DenseGaussian {
    mean: DVector<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    log_det: f64,
}

impl DenseGaussian {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim("covariance vs mean", mean.len(), covariance.nrows())?;
        check_dim("covariance shape", covariance.nrows(), covariance.ncols())?;
        let lu = covariance.lu();
        // Sum log |U_ii| so large or tiny determinants do not overflow.
        let diag = lu.u().diagonal();
        let log_det: f64 = diag.iter().map(|d| d.abs().ln()).sum();
        let negatives = diag.iter().filter(|d| **d < 0.0).count()
            + usize::from(lu.p().determinant::<f64>() < 0.0);
        if negatives % 2 == 1 || !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite {
                size: mean.len(),
                max_jitter: 0.0,
            });
        }
        Ok(Self { mean, lu, log_det })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let sol = self
            .lu
            .solve(&d)
            .expect("factored covariance is invertible");
        -0.5 * (d.len() as f64 * LN_2PI + self.log_det + d.dot(&sol))
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu.solve(b).expect("factored covariance is invertible")
    }
}

/// Naive multivariate normal log density.
pub fn mvn_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
) -> Result<f64> {
    check_dim("point vs mean", mean.len(), x.len())?;
    Ok(DenseGaussian::new(mean.clone(), covariance.clone())?.log_density(x))
}

/// `KL(N(μ₀, S₀) ‖ N(μ₁, S₁))` on materialised covariances.
pub fn dense_gaussian_kl(
    mu0: &DVector<f64>,
    s0: &DMatrix<f64>,
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
) -> Result<f64> {
    let q = DenseGaussian::new(mu0.clone(), s0.clone())?;
    let p = DenseGaussian::new(mu1.clone(), s1.clone())?;
    let k = mu0.len() as f64;
    let trace = p.solve(s0).trace();
    let d = DMatrix::from_column_slice(mu0.len(), 1, (mu1 - mu0).as_slice());
    let maha = (d.transpose() * p.solve(&d))[(0, 0)];
    Ok(0.5 * (trace + maha - k + p.log_det() - q.log_det()))
}

/// Central finite differences with step `h_i = rel · (1 + |x_i|)`.
pub fn finite_diff_grad<F>(f: F, x: &DVector<f64>, rel: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if !(rel > 0.0) {
        return Err(Error::InvalidArgument(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = rel * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Default relative finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Finite-difference gradient with a Richardson sanity pass.
#[derive(Clone, Debug)]
pub struct CheckedGradient {
    pub gradient: DVector<f64>,
    /// Largest `|g(h) − g(h/2)|` scaled by `max(1, |g|)`.
    pub step_disagreement: f64,
    /// Set when the disagreement exceeds ten times the tolerance.
    pub flagged: bool,
}

/// Runs [`finite_diff_grad`] at `h` and `h/2` and returns the Richardson
/// extrapolation `(4 g(h/2) − g(h)) / 3`.
pub fn finite_diff_grad_checked<F>(
    f: F,
    x: &DVector<f64>,
    rel: f64,
    tolerance: f64,
) -> Result<CheckedGradient>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let coarse = finite_diff_grad(&f, x, rel)?;
    let fine = finite_diff_grad(&f, x, rel / 2.0)?;
    let step_disagreement = coarse
        .iter()
        .zip(fine.iter())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(CheckedGradient {
        gradient: (fine * 4.0 - coarse) / 3.0,
        step_disagreement,
        flagged: step_disagreement > 10.0 * tolerance,
    })
}

/// Relative error `‖a − b‖∞ / max(1, ‖b‖∞)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// RBF Gram matrix written out directly from the kernel formula.
pub fn rbf_gram(x: &DMatrix<f64>, z: &DMatrix<f64>, k: &KernelParams<f64>) -> DMatrix<f64> {
    let var = k.outputscale * k.outputscale;
    let two_ell2 = 2.0 * k.lengthscale * k.lengthscale;
    DMatrix::from_fn(x.nrows(), z.nrows(), |i, j| {
        let sq: f64 = (0..x.ncols())
            .map(|d| (x[(i, d)] - z[(j, d)]).powi(2))
            .sum();
        var * (-sq / two_ell2).exp()
    })
}

/// `log N(y | 0, K + σ_y² I)` for a given kernel matrix.
pub fn gp_lml_from_kernel(
    kernel: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
) -> Result<f64> {
    check_dim("kernel vs targets", kernel.nrows(), y.len())?;
    let mut c = kernel.clone();
    for i in 0..y.len() {
        c[(i, i)] += noise_variance;
    }
    mvn_log_density(y, &DVector::zeros(y.len()), &c)
}

/// Exact GP log marginal likelihood with an RBF kernel.
pub fn gp_lml(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    k: &KernelParams<f64>,
    noise_variance: f64,
) -> Result<f64> {
    check_dim("inputs vs targets", x.nrows(), y.len())?;
    if !(noise_variance > 0.0) {
        return Err(Error::InvalidArgument(
            "noise variance must be positive".into(),
        ));
    }
    gp_lml_from_kernel(&rbf_gram(x, x, k), y, noise_variance)
}

/// Exact GP predictive mean and variance of `y*` at the rows of `x_star`.
pub fn gp_predictive(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    x_star: &DMatrix<f64>,
    k: &KernelParams<f64>,
    noise_variance: f64,
) -> Result<Vec<(f64, f64)>> {
    check_dim("inputs vs targets", x.nrows(), y.len())?;
    let mut c = rbf_gram(x, x, k);
    for i in 0..y.len() {
        c[(i, i)] += noise_variance;
    }
    let lu = c.lu();
    let cross = rbf_gram(x, x_star, k);
    let alpha = lu.solve(y).ok_or(Error::NotPositiveDefinite {
        size: y.len(),
        max_jitter: 0.0,
    })?;
    let solved = lu.solve(&cross).ok_or(Error::NotPositiveDefinite {
        size: y.len(),
        max_jitter: 0.0,
    })?;
    Ok((0..x_star.nrows())
        .map(|j| {
            let mean = cross.column(j).dot(&alpha);
            let var = k.outputscale * k.outputscale - cross.column(j).dot(&solved.column(j))
                + noise_variance;
            (mean, var)
        })
        .collect())
}
