#![allow(dead_code)]

use elbo_razor::features::{KernelParams, RffFeatureMap};
use elbo_razor::model::Hyperparameters;
use elbo_razor::vi::{GaussianPosterior, SpdCovariance, Structure};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A random regression problem with a posterior and hyperparameters to
/// evaluate at.
pub struct Instance {
    pub phi: DMatrix<f64>,
    pub y: DVector<f64>,
    pub q: GaussianPosterior<f64>,
    pub h: Hyperparameters<f64>,
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_iterator(
        n,
        (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)),
    )
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

pub fn random_design(rng: &mut ChaCha8Rng, n: usize, r: usize) -> (DMatrix<f64>, DVector<f64>) {
    let x = normals(rng, n, 1.0);
    let kernel = KernelParams::new(log_uniform(rng, 0.3, 2.0), log_uniform(rng, 0.5, 2.0)).unwrap();
    let map = RffFeatureMap::<f64>::sample(rng.random(), 1, r).unwrap();
    let phi = map
        .design_matrix(&DMatrix::from_column_slice(n, 1, x.as_slice()), &kernel)
        .unwrap();
    let y = x.map(|v| (3.0 * v).sin()) + normals(rng, n, 0.1);
    (phi, y)
}

pub fn random_hyper(rng: &mut ChaCha8Rng, temperature: f64) -> Hyperparameters<f64> {
    Hyperparameters {
        noise_variance: log_uniform(rng, 0.01, 1.0),
        prior_scale: log_uniform(rng, 0.2, 3.0),
        temperature,
        ..Hyperparameters::unit()
    }
}

pub fn random_posterior(
    rng: &mut ChaCha8Rng,
    structure: Structure,
    r: usize,
) -> GaussianPosterior<f64> {
    let mean = normals(rng, r, 0.7);
    match structure {
        Structure::Diagonal => {
            let var = DVector::from_iterator(r, (0..r).map(|_| log_uniform(rng, 0.01, 2.0)));
            GaussianPosterior::diagonal(mean, var).unwrap()
        }
        Structure::RankOne => {
            let v = normals(rng, r, 0.5);
            GaussianPosterior::rank_one(mean, v, log_uniform(rng, 1e-4, 0.1)).unwrap()
        }
        Structure::FullRank => {
            let a = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut s = &a * a.transpose() / r as f64;
            for i in 0..r {
                s[(i, i)] += 0.05;
            }
            GaussianPosterior::full_rank(mean, SpdCovariance::from_matrix(s).unwrap()).unwrap()
        }
    }
}

pub fn instance(seed: u64, structure: Structure, n: usize, r: usize, temperature: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (phi, y) = random_design(&mut rng, n, r);
    let h = random_hyper(&mut rng, temperature);
    let q = random_posterior(&mut rng, structure, r);
    Instance { phi, y, q, h }
}

/// `‖g‖∞ / max(1, |J|)`: a gradient scaled by the objective it belongs to.
pub fn scaled_gradient(g: &DVector<f64>, objective: f64) -> f64 {
    g.amax() / objective.abs().max(1.0)
}

#[allow(unused_imports)]
pub use stationarity::*;

mod stationarity {
    use super::*;
    use elbo_razor::oracle::{finite_diff_grad_checked, DEFAULT_FD_STEP};
    use elbo_razor::vi;

    fn fd(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> f64 {
        let g = finite_diff_grad_checked(&f, x, DEFAULT_FD_STEP, 1e-6).unwrap();
        scaled_gradient(&g.gradient, f(x))
    }

    fn elbo(q: &GaussianPosterior<f64>, inst: &Instance, h: &Hyperparameters<f64>) -> f64 {
        vi::elbo(q, &inst.phi, &inst.y, h).unwrap()
    }

    /// Scaled finite-difference gradient in μ at the closed-form mean.
    pub fn mean(inst: &Instance) -> f64 {
        let h = inst.h;
        let mu = vi::update_mean(
            &inst.phi,
            &inst.y,
            h.noise_variance,
            h.prior_scale,
            h.temperature,
        )
        .unwrap();
        fd(
            |m| elbo(&inst.q.clone().with_mean(m.clone()).unwrap(), inst, &h),
            &mu,
        )
    }

    /// In the log variances, at the closed-form diagonal covariance.
    pub fn diagonal(inst: &Instance) -> f64 {
        let h = inst.h;
        let var = vi::update_diagonal_variances(
            &inst.phi,
            h.noise_variance,
            h.prior_scale,
            h.temperature,
        )
        .unwrap();
        let mean = inst.q.mean().clone();
        fd(
            |lv| {
                elbo(
                    &GaussianPosterior::diagonal(mean.clone(), lv.map(f64::exp)).unwrap(),
                    inst,
                    &h,
                )
            },
            &var.map(f64::ln),
        )
    }

    /// In the lower triangle of Σ (symmetric perturbations), at the
    /// closed-form full covariance.
    pub fn full(inst: &Instance) -> f64 {
        let h = inst.h;
        let sigma =
            vi::update_full_covariance(&inst.phi, h.noise_variance, h.prior_scale, h.temperature)
                .unwrap()
                .to_dense();
        let r = sigma.nrows();
        let idx: Vec<(usize, usize)> = (0..r).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
        let x0 = DVector::from_iterator(idx.len(), idx.iter().map(|&(i, j)| sigma[(i, j)]));
        let mean = inst.q.mean().clone();
        fd(
            |x| {
                let mut s = DMatrix::zeros(r, r);
                for (k, &(i, j)) in idx.iter().enumerate() {
                    s[(i, j)] = x[k];
                    s[(j, i)] = x[k];
                }
                let cov = SpdCovariance::from_matrix(s).unwrap();
                elbo(
                    &GaussianPosterior::full_rank(mean.clone(), cov).unwrap(),
                    inst,
                    &h,
                )
            },
            &x0,
        )
    }

    /// In `v`, at the exact rank-1 maximiser.
    pub fn rank_one(inst: &Instance) -> f64 {
        let h = inst.h;
        let (v, eps) = inst.q.rank_one_direction().expect("rank-1 instance");
        let v = vi::optimal_rank_one_direction(
            v,
            &inst.phi,
            h.noise_variance,
            h.prior_scale,
            h.temperature,
            eps,
        )
        .unwrap();
        let mean = inst.q.mean().clone();
        fd(
            |v| {
                elbo(
                    &GaussianPosterior::rank_one(mean.clone(), v.clone(), eps).unwrap(),
                    inst,
                    &h,
                )
            },
            &v,
        )
    }

    /// In `log σ_y²`, at the closed-form noise variance.
    pub fn noise(inst: &Instance) -> f64 {
        let s2 = vi::update_noise_variance(&inst.q, &inst.phi, &inst.y).unwrap();
        fd(
            |x| {
                elbo(
                    &inst.q,
                    inst,
                    &Hyperparameters {
                        noise_variance: x[0].exp(),
                        ..inst.h
                    },
                )
            },
            &DVector::from_element(1, s2.ln()),
        )
    }

    /// In `log τ`, at the closed-form prior scale.
    pub fn prior_scale(inst: &Instance) -> f64 {
        let tau = vi::update_prior_scale(&inst.q);
        fd(
            |x| {
                elbo(
                    &inst.q,
                    inst,
                    &Hyperparameters {
                        prior_scale: x[0].exp(),
                        ..inst.h
                    },
                )
            },
            &DVector::from_element(1, tau.ln()),
        )
    }
}
