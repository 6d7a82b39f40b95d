//! Interleaved coordinate-ascent / Adam training of the variational
//! posterior and hyperparameters, with a learning-rate grid search.
//!
//! One iteration runs, in order:
//! 1. closed-form mean update;
//! 2. closed-form covariance update (diagonal, full-rank) or the rank-1
//!    direction update;
//! 3. closed-form noise-variance update, floored at `noise_floor`;
//! 4. prior-scale update when empirical Bayes is on;
//! 5. one Adam step on `(log ℓ_k, log σ_k)` with a cosine-annealed rate.

mod adam;

pub use adam::{adam_step, cosine_lr, AdamState};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{KernelParams, RffFeatureMap};
use crate::linalg::frobenius_dot;
use crate::model::{
    log_marginal_likelihood, log_marginal_likelihood_gradient, Dataset, Hyperparameters,
};
use crate::scalar::{lit, Real};
use crate::vi::{
    self, CollapseDiagnostics, Covariance, GaussianPosterior, SpdCovariance, Structure,
};

/// Default initial learning-rate grid.
pub const DEFAULT_LR_GRID: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];

/// How τ is learned when empirical Bayes is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorScaleMode {
    /// `τ = (tr Σ_q + ‖μ_q‖²)/R`.
    Closed,
    /// Adam on `log τ`.
    Grad,
}

/// How the rank-1 direction `v_q` is updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankOneUpdate {
    /// Exact maximiser from [`vi::optimal_rank_one_direction`].
    Closed,
    /// One Adam step on the analytic gradient.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct FitConfig<T> {
    pub structure: Structure,
    pub temperature: T,
    pub empirical_bayes: bool,
    pub prior_scale_mode: PriorScaleMode,
    pub rank_one_update: RankOneUpdate,
    pub max_iters: usize,
    /// Relative ELBO change over `window` iterations that counts as converged.
    pub tolerance: T,
    pub window: usize,
    pub lr_grid: Vec<T>,
    /// Cosine schedule length; `None` uses `max_iters`.
    pub schedule_steps: Option<usize>,
    pub seed: u64,
    pub init_noise_variance: T,
    pub init_prior_scale: T,
    pub init_lengthscale: T,
    pub init_outputscale: T,
    /// Rank-1 jitter ε.
    pub jitter: T,
    pub noise_floor: T,
    pub learn_noise: bool,
    pub learn_kernel: bool,
    /// Record the log marginal likelihood in every trace entry.
    pub trace_lml: bool,
}

impl<T: Real> FitConfig<T> {
    pub fn new(structure: Structure) -> Self {
        Self {
            structure,
            temperature: T::one(),
            empirical_bayes: false,
            prior_scale_mode: PriorScaleMode::Closed,
            rank_one_update: RankOneUpdate::Closed,
            max_iters: 2000,
            tolerance: lit(1e-8),
            window: 10,
            lr_grid: DEFAULT_LR_GRID.iter().map(|&v| lit(v)).collect(),
            schedule_steps: None,
            seed: 0,
            init_noise_variance: T::one(),
            init_prior_scale: T::one(),
            init_lengthscale: T::one(),
            init_outputscale: T::one(),
            jitter: lit(vi::DEFAULT_RANK_ONE_JITTER),
            noise_floor: lit(1e-12),
            learn_noise: true,
            learn_kernel: true,
            trace_lml: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lr_grid.is_empty() {
            return bad("learning-rate grid is empty");
        }
        if self.lr_grid.iter().any(|&lr| !(lr > T::zero())) {
            return bad("learning rates must be positive");
        }
        if !(self.tolerance > T::zero()) {
            return bad("tolerance must be positive");
        }
        if self.max_iters == 0 || self.window == 0 {
            return bad("max_iters and window must be at least 1");
        }
        if self.schedule_steps == Some(0) {
            return bad("schedule_steps must be at least 1");
        }
        let positives = [
            self.temperature,
            self.init_noise_variance,
            self.init_prior_scale,
            self.init_lengthscale,
            self.init_outputscale,
            self.jitter,
            self.noise_floor,
        ];
        if positives.iter().any(|&v| !(v > T::zero() && v.is_finite())) {
            return bad("temperature, initial values, jitter and noise floor must be positive");
        }
        Ok(())
    }

    pub fn initial_hyperparameters(&self) -> Result<Hyperparameters<T>> {
        Hyperparameters::new(
            self.init_noise_variance,
            self.init_prior_scale,
            KernelParams::new(self.init_lengthscale, self.init_outputscale)?,
            self.temperature,
        )
    }

    fn schedule_total(&self) -> usize {
        self.schedule_steps.unwrap_or(self.max_iters)
    }
}

/// One row of the per-iteration trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceEntry<T> {
    pub iteration: usize,
    pub elbo: T,
    pub lml: Option<T>,
    pub noise_variance: T,
    pub prior_scale: T,
    pub lengthscale: T,
    pub outputscale: T,
    pub learning_rate: T,
    pub alignment: Option<T>,
    pub norm_gap: Option<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged { iterations: usize },
    MaxIterations,
}

/// Outcome of one learning-rate candidate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate<T> {
    pub learning_rate: T,
    /// Final objective, or the error that aborted the candidate.
    pub outcome: std::result::Result<T, String>,
}

#[derive(Clone, Debug)]
pub struct FitResult<T: Real> {
    pub posterior: GaussianPosterior<T>,
    pub hyperparameters: Hyperparameters<T>,
    pub trace: Vec<TraceEntry<T>>,
    pub learning_rate: T,
    pub status: FitStatus,
    /// Final ELBO at the returned posterior and hyperparameters.
    pub elbo: T,
    /// Final log marginal likelihood at the returned hyperparameters.
    pub lml: T,
    pub collapse: Option<CollapseDiagnostics<T>>,
    /// True when σ_y² ended on the floor.
    pub noise_floor_hit: bool,
    /// Closed-form steps that lowered the ELBO by more than the slack.
    pub ascent_violations: usize,
    pub candidates: Vec<Candidate<T>>,
}

impl<T: Real> FitResult<T> {
    pub fn train_mse(&self, phi: &DMatrix<T>, y: &DVector<T>) -> T {
        (y - phi * self.posterior.mean()).norm_squared() / lit::<T>(y.len() as f64)
    }
}

/// Fits `q` and the hyperparameters by ELBO maximisation, once per grid
/// learning rate, and returns the candidate with the highest final ELBO.
pub fn fit<T: Real>(
    data: &Dataset<T>,
    map: &RffFeatureMap<T>,
    cfg: &FitConfig<T>,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    run_grid(cfg, |lr| fit_single(data, map, cfg, lr))
}

/// Type-II maximum likelihood: Adam on the log hyperparameters ascending the
/// exact log marginal likelihood. τ is learned only with empirical Bayes on.
/// The returned posterior is the exact posterior at the final values.
pub fn fit_hyperparameters_lml<T: Real>(
    data: &Dataset<T>,
    map: &RffFeatureMap<T>,
    cfg: &FitConfig<T>,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    run_grid(cfg, |lr| fit_lml_single(data, map, cfg, lr))
}

fn run_grid<T: Real, F>(cfg: &FitConfig<T>, run: F) -> Result<FitResult<T>>
where
    F: Fn(T) -> Result<FitResult<T>> + Sync,
{
    let mut grid = cfg.lr_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("validated learning rates"));
    let outcomes: Vec<(T, Result<FitResult<T>>)> =
        grid.par_iter().map(|&lr| (lr, run(lr))).collect();
    let candidates: Vec<Candidate<T>> = outcomes
        .iter()
        .map(|(lr, r)| Candidate {
            learning_rate: *lr,
            outcome: r.as_ref().map(|f| f.elbo).map_err(|e| e.to_string()),
        })
        .collect();
    // Ascending learning rate with a strict comparison keeps the smaller rate on ties.
    let mut best: Option<FitResult<T>> = None;
    for (_, outcome) in outcomes {
        if let Ok(r) = outcome {
            if best.as_ref().is_none_or(|b| r.elbo > b.elbo) {
                best = Some(r);
            }
        }
    }
    match best {
        Some(mut r) => {
            r.candidates = candidates;
            Ok(r)
        }
        None => Err(Error::AllCandidatesFailed(
            candidates
                .iter()
                .map(|c| {
                    format!(
                        "lr={}: {}",
                        c.learning_rate,
                        c.outcome.as_ref().err().map_or("", |s| s)
                    )
                })
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}

fn initial_posterior<T: Real>(cfg: &FitConfig<T>, r: usize) -> Result<GaussianPosterior<T>> {
    let mean = DVector::zeros(r);
    match cfg.structure {
        Structure::Diagonal => {
            GaussianPosterior::diagonal(mean, DVector::from_element(r, cfg.init_prior_scale))
        }
        Structure::RankOne => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let v: DVector<T> = DVector::from_iterator(
                r,
                (0..r).map(|_| lit::<T>(StandardNormal.sample(&mut rng))),
            );
            let v = v.normalize();
            GaussianPosterior::rank_one(mean, v, cfg.jitter)
        }
        Structure::FullRank => GaussianPosterior::full_rank(
            mean,
            SpdCovariance::scaled_identity(r, cfg.init_prior_scale)?,
        ),
    }
}

struct AscentMonitor<T> {
    last: T,
    violations: usize,
    targets_sq: T,
}

impl<T: Real> AscentMonitor<T> {
    /// Counts a violation when `value` falls below the previous ELBO by more
    /// than a relative slack plus the rounding floor `‖y‖²/(T σ_y²)·eps` of the
    /// data term.
    fn check(&mut self, value: T, h: &Hyperparameters<T>) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite("ELBO"));
        }
        let rounding = lit::<T>(64.0) * T::default_epsilon() * self.targets_sq
            / (h.temperature * h.noise_variance);
        let slack = lit::<T>(1e-9) * self.last.abs().max(T::one()) + rounding;
        if value < self.last - slack {
            self.violations += 1;
        }
        self.last = value;
        Ok(())
    }
}

fn with_covariance<T: Real>(
    q: &GaussianPosterior<T>,
    cov: Covariance<T>,
) -> Result<GaussianPosterior<T>> {
    let mean = q.mean().clone();
    match cov {
        Covariance::Diagonal(d) => GaussianPosterior::diagonal(mean, d),
        Covariance::RankOne { direction, jitter } => {
            GaussianPosterior::rank_one(mean, direction, jitter)
        }
        Covariance::FullRank(s) => GaussianPosterior::full_rank(mean, s),
    }
}

/// Closed-form update of the covariance block (rank-1 in closed mode).
fn closed_form_covariance<T: Real>(
    q: &GaussianPosterior<T>,
    phi: &DMatrix<T>,
    h: &Hyperparameters<T>,
    jitter: T,
) -> Result<Covariance<T>> {
    Ok(match q.covariance() {
        Covariance::Diagonal(_) => Covariance::Diagonal(vi::update_diagonal_variances(
            phi,
            h.noise_variance,
            h.prior_scale,
            h.temperature,
        )?),
        Covariance::RankOne { direction, .. } => Covariance::RankOne {
            direction: vi::optimal_rank_one_direction(
                direction,
                phi,
                h.noise_variance,
                h.prior_scale,
                h.temperature,
                jitter,
            )?,
            jitter,
        },
        Covariance::FullRank(_) => Covariance::FullRank(vi::update_full_covariance(
            phi,
            h.noise_variance,
            h.prior_scale,
            h.temperature,
        )?),
    })
}

fn diagnostics<T: Real>(
    q: &GaussianPosterior<T>,
    phi: &DMatrix<T>,
) -> Result<Option<CollapseDiagnostics<T>>> {
    q.rank_one_direction()
        .map(|(v, eps)| vi::collapse_diagnostics(v, phi, eps))
        .transpose()
}

fn kernel_gradient<T: Real>(
    grad_phi: &DMatrix<T>,
    phi: &DMatrix<T>,
    dphi_dlog_ell: &DMatrix<T>,
) -> DVector<T> {
    DVector::from_vec(vec![
        frobenius_dot(grad_phi, dphi_dlog_ell),
        frobenius_dot(grad_phi, phi),
    ])
}

fn converged<T: Real>(history: &[T], window: usize, tol: T) -> bool {
    let n = history.len();
    if n <= window {
        return false;
    }
    let now = history[n - 1];
    let then = history[n - 1 - window];
    (now - then).abs() <= tol * now.abs().max(T::tiny())
}

fn fit_single<T: Real>(
    data: &Dataset<T>,
    map: &RffFeatureMap<T>,
    cfg: &FitConfig<T>,
    base_lr: T,
) -> Result<FitResult<T>> {
    let x = data.inputs();
    let y = data.targets();
    let r = map.num_features();
    let total = cfg.schedule_total();
    let mut h = cfg.initial_hyperparameters()?;
    let mut q = initial_posterior(cfg, r)?;
    let mut log_kernel =
        DVector::from_vec(vec![h.kernel.lengthscale.ln(), h.kernel.outputscale.ln()]);
    let mut kernel_adam = AdamState::new(2);
    let mut direction_adam = AdamState::new(r);
    let mut log_tau = DVector::from_element(1, h.prior_scale.ln());
    let mut tau_adam = AdamState::new(1);

    let (mut phi, mut dphi) = map.design_matrix_with_derivative(x, &h.kernel)?;
    let mut monitor = AscentMonitor {
        last: vi::elbo(&q, &phi, y, &h)?,
        violations: 0,
        targets_sq: y.norm_squared(),
    };
    let mut trace = Vec::new();
    let mut history = Vec::new();
    let mut status = FitStatus::MaxIterations;

    for it in 0..cfg.max_iters {
        let lr = cosine_lr(it.min(total), total, base_lr)?;

        let mean = vi::update_mean(&phi, y, h.noise_variance, h.prior_scale, h.temperature)?;
        q = q.with_mean(mean)?;
        monitor.check(vi::elbo(&q, &phi, y, &h)?, &h)?;

        match (cfg.structure, cfg.rank_one_update) {
            (Structure::RankOne, RankOneUpdate::Adam) => {
                let (v, eps) = q.rank_one_direction().expect("rank-1 posterior");
                let grad = vi::grad_v_tempered(
                    v,
                    &phi,
                    h.noise_variance,
                    h.prior_scale,
                    h.temperature,
                    eps,
                )?;
                let mut v = v.clone();
                direction_adam.step_mut(&mut v, &(-grad), lr)?;
                q = GaussianPosterior::rank_one(q.mean().clone(), v, eps)?;
                monitor.last = vi::elbo(&q, &phi, y, &h)?;
            }
            _ => {
                let cov = closed_form_covariance(&q, &phi, &h, cfg.jitter)?;
                q = with_covariance(&q, cov)?;
                monitor.check(vi::elbo(&q, &phi, y, &h)?, &h)?;
            }
        }

        if cfg.learn_noise {
            h.noise_variance = match vi::update_noise_variance(&q, &phi, y) {
                Ok(v) => v.max(cfg.noise_floor),
                Err(Error::NoiseVarianceUnderflow) => cfg.noise_floor,
                Err(e) => return Err(e),
            };
            monitor.check(vi::elbo(&q, &phi, y, &h)?, &h)?;
        }

        if cfg.empirical_bayes {
            match cfg.prior_scale_mode {
                PriorScaleMode::Closed => {
                    h.prior_scale = vi::update_prior_scale(&q);
                    monitor.check(vi::elbo(&q, &phi, y, &h)?, &h)?;
                }
                PriorScaleMode::Grad => {
                    let g = vi::elbo_grad_log_prior_scale(&q, h.prior_scale);
                    tau_adam.step_mut(&mut log_tau, &DVector::from_element(1, -g), lr)?;
                    h.prior_scale = log_tau[0].exp();
                }
            }
            log_tau[0] = h.prior_scale.ln();
        }

        if cfg.learn_kernel {
            let grad_phi = vi::elbo_grad_features(&q, &phi, y, &h)?;
            let g = kernel_gradient(&grad_phi, &phi, &dphi);
            kernel_adam.step_mut(&mut log_kernel, &(-g), lr)?;
            h.kernel = KernelParams::new(log_kernel[0].exp(), log_kernel[1].exp())?;
            (phi, dphi) = map.design_matrix_with_derivative(x, &h.kernel)?;
        }

        let j = vi::elbo(&q, &phi, y, &h)?;
        if !j.is_finite() {
            return Err(Error::NonFinite("ELBO"));
        }
        monitor.last = j;
        let collapse = diagnostics(&q, &phi)?;
        trace.push(TraceEntry {
            iteration: it,
            elbo: j,
            lml: if cfg.trace_lml {
                Some(log_marginal_likelihood(&phi, y, &h)?)
            } else {
                None
            },
            noise_variance: h.noise_variance,
            prior_scale: h.prior_scale,
            lengthscale: h.kernel.lengthscale,
            outputscale: h.kernel.outputscale,
            learning_rate: lr,
            alignment: collapse.map(|c| c.alignment),
            norm_gap: collapse.map(|c| c.norm_gap),
        });
        history.push(j);
        if converged(&history, cfg.window, cfg.tolerance) {
            status = FitStatus::Converged { iterations: it + 1 };
            break;
        }
    }

    // Refresh the variational blocks at the final hyperparameters.
    let mean = vi::update_mean(&phi, y, h.noise_variance, h.prior_scale, h.temperature)?;
    q = q.with_mean(mean)?;
    if !(cfg.structure == Structure::RankOne && cfg.rank_one_update == RankOneUpdate::Adam) {
        let cov = closed_form_covariance(&q, &phi, &h, cfg.jitter)?;
        q = with_covariance(&q, cov)?;
    }
    let elbo = vi::elbo(&q, &phi, y, &h)?;
    let lml = log_marginal_likelihood(&phi, y, &h)?;
    let collapse = diagnostics(&q, &phi)?;
    Ok(FitResult {
        posterior: q,
        noise_floor_hit: h.noise_variance <= cfg.noise_floor,
        hyperparameters: h,
        trace,
        learning_rate: base_lr,
        status,
        elbo,
        lml,
        collapse,
        ascent_violations: monitor.violations,
        candidates: Vec::new(),
    })
}

fn fit_lml_single<T: Real>(
    data: &Dataset<T>,
    map: &RffFeatureMap<T>,
    cfg: &FitConfig<T>,
    base_lr: T,
) -> Result<FitResult<T>> {
    let x = data.inputs();
    let y = data.targets();
    let total = cfg.schedule_total();
    let mut h = cfg.initial_hyperparameters()?;
    h.temperature = T::one();
    // [log σ_y², log τ, log ℓ_k, log σ_k]
    let mut theta = DVector::from_vec(vec![
        h.noise_variance.ln(),
        h.prior_scale.ln(),
        h.kernel.lengthscale.ln(),
        h.kernel.outputscale.ln(),
    ]);
    let mut adam = AdamState::new(4);
    let log_floor = cfg.noise_floor.ln();
    let mut trace = Vec::new();
    let mut history = Vec::new();
    let mut status = FitStatus::MaxIterations;

    for it in 0..cfg.max_iters {
        let lr = cosine_lr(it.min(total), total, base_lr)?;
        let (phi, dphi) = map.design_matrix_with_derivative(x, &h.kernel)?;
        let g = log_marginal_likelihood_gradient(&phi, y, &h)?;
        let mut grad = DVector::from_vec(vec![
            g.d_log_noise_variance,
            g.d_log_prior_scale,
            frobenius_dot(&g.d_features, &dphi),
            frobenius_dot(&g.d_features, &phi),
        ]);
        if !cfg.learn_noise {
            grad[0] = T::zero();
        }
        if !cfg.empirical_bayes {
            grad[1] = T::zero();
        }
        if !cfg.learn_kernel {
            grad[2] = T::zero();
            grad[3] = T::zero();
        }
        adam.step_mut(&mut theta, &(-grad), lr)?;
        theta[0] = theta[0].max(log_floor);
        h.noise_variance = theta[0].exp();
        h.prior_scale = theta[1].exp();
        h.kernel = KernelParams::new(theta[2].exp(), theta[3].exp())?;

        let phi = map.design_matrix(x, &h.kernel)?;
        let lml = log_marginal_likelihood(&phi, y, &h)?;
        if !lml.is_finite() {
            return Err(Error::NonFinite("log marginal likelihood"));
        }
        trace.push(TraceEntry {
            iteration: it,
            elbo: lml,
            lml: Some(lml),
            noise_variance: h.noise_variance,
            prior_scale: h.prior_scale,
            lengthscale: h.kernel.lengthscale,
            outputscale: h.kernel.outputscale,
            learning_rate: lr,
            alignment: None,
            norm_gap: None,
        });
        history.push(lml);
        if converged(&history, cfg.window, cfg.tolerance) {
            status = FitStatus::Converged { iterations: it + 1 };
            break;
        }
    }

    let phi = map.design_matrix(x, &h.kernel)?;
    let mean = vi::update_mean(&phi, y, h.noise_variance, h.prior_scale, T::one())?;
    let cov = vi::update_full_covariance(&phi, h.noise_variance, h.prior_scale, T::one())?;
    let posterior = GaussianPosterior::full_rank(mean, cov)?;
    let lml = log_marginal_likelihood(&phi, y, &h)?;
    let elbo = vi::elbo(&posterior, &phi, y, &h)?;
    Ok(FitResult {
        posterior,
        noise_floor_hit: h.noise_variance <= cfg.noise_floor,
        hyperparameters: h,
        trace,
        learning_rate: base_lr,
        status,
        elbo,
        lml,
        collapse: None,
        ascent_violations: 0,
        candidates: Vec::new(),
    })
}
