use super::*;
use approx::assert_relative_eq;

fn phi_small() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        4,
        &[
            0.5, -0.2, 0.1, 0.9, //
            -0.3, 0.8, 0.4, 0.0, //
            0.2, 0.2, -0.6, 0.3,
        ],
    )
}

fn hyper(noise: f64, tau: f64, t: f64) -> Hyperparameters<f64> {
    Hyperparameters {
        noise_variance: noise,
        prior_scale: tau,
        temperature: t,
        ..Hyperparameters::unit()
    }
}

#[test]
fn likelihood_with_vanishing_covariance_and_zero_targets() {
    let q =
        GaussianPosterior::diagonal(DVector::zeros(4), DVector::from_element(4, 1e-300)).unwrap();
    let y = DVector::zeros(3);
    let got = expected_log_likelihood(&q, &phi_small(), &y, 0.3).unwrap();
    assert_relative_eq!(
        got,
        -1.5 * (std::f64::consts::TAU * 0.3).ln(),
        epsilon = 1e-12
    );
}

#[test]
fn rank_one_trace_in_null_space() {
    // Φ has a zero last column, so e_4 is in its null space.
    let mut phi = phi_small();
    phi.column_mut(3).fill(0.0);
    let v = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.7]);
    let eps = 1e-3;
    let q = GaussianPosterior::rank_one(DVector::zeros(4), v, eps).unwrap();
    assert_relative_eq!(
        q.feature_trace(&phi),
        eps * (&phi * phi.transpose()).trace(),
        epsilon = 1e-15
    );
}

#[test]
fn kl_zero_at_prior_and_mean_shift() {
    let tau = 1.7;
    let q = GaussianPosterior::diagonal(DVector::zeros(5), DVector::from_element(5, tau)).unwrap();
    assert_relative_eq!(kl_to_prior(&q, tau).unwrap(), 0.0, epsilon = 1e-14);
    let mut mean = DVector::zeros(5);
    mean[0] = 0.8;
    let q = q.with_mean(mean).unwrap();
    assert_relative_eq!(
        kl_to_prior(&q, tau).unwrap(),
        0.64 / (2.0 * tau),
        epsilon = 1e-14
    );
}

#[test]
fn mean_update_cases() {
    let phi = phi_small();
    assert_eq!(
        update_mean(&phi, &DVector::zeros(3), 0.2, 1.0, 1.0).unwrap(),
        DVector::zeros(4)
    );
    let one = DMatrix::from_element(1, 1, 1.0);
    let m = update_mean(&one, &DVector::from_element(1, 1.0), 1.0, 1.0, 1.0).unwrap();
    assert_relative_eq!(m[0], 0.5, epsilon = 1e-15);
}

#[test]
fn mean_update_dual_and_primal_agree() {
    let phi = phi_small();
    let y = DVector::from_vec(vec![0.3, -1.0, 0.5]);
    // R = 4 > N = 3 uses the dual route; the transpose problem uses the primal.
    let dual = update_mean(&phi, &y, 0.4, 2.0, 0.5).unwrap();
    let a = 0.5 * 0.4;
    let mut p = phi.tr_mul(&phi) / a;
    for i in 0..4 {
        p[(i, i)] += 0.5;
    }
    let primal = p.try_inverse().unwrap() * phi.tr_mul(&y) / a;
    assert_relative_eq!(dual, primal, epsilon = 1e-12);
}

#[test]
fn diagonal_update_cases() {
    let mut phi = phi_small();
    phi.column_mut(2).fill(0.0);
    let d = update_diagonal_variances(&phi, 0.3, 2.5, 1.0).unwrap();
    assert_relative_eq!(d[2], 2.5, epsilon = 1e-15);
    // τ → ∞ leaves T σ_y² / ‖φ_r‖².
    let d = update_diagonal_variances(&phi, 0.3, 1e300, 2.0).unwrap();
    let c0 = phi.column(0).norm_squared();
    assert_relative_eq!(d[0], 2.0 * 0.3 / c0, epsilon = 1e-12);
    assert!(d.iter().all(|&v| v > 0.0));
}

#[test]
fn full_update_with_zero_features_is_prior() {
    for (n, r) in [(2, 5), (6, 3)] {
        let cov = update_full_covariance(&DMatrix::zeros(n, r), 0.5, 3.0, 1.0).unwrap();
        assert_relative_eq!(
            cov.to_dense(),
            DMatrix::identity(r, r) * 3.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(cov.log_det(), r as f64 * 3.0f64.ln(), epsilon = 1e-12);
    }
}

#[test]
fn full_update_forms_agree() {
    let phi = phi_small();
    let woodbury = update_full_covariance(&phi, 0.3, 1.5, 2.0).unwrap();
    assert!(!woodbury.is_dense());
    let mut p = phi.tr_mul(&phi) / 0.6;
    for i in 0..4 {
        p[(i, i)] += 1.0 / 1.5;
    }
    let direct = p.clone().try_inverse().unwrap();
    assert_relative_eq!(woodbury.to_dense(), direct, epsilon = 1e-12);
    assert_relative_eq!(woodbury.log_det(), -p.determinant().ln(), epsilon = 1e-10);
    let dense = update_full_covariance(&phi.transpose(), 0.3, 1.5, 2.0).unwrap();
    assert!(dense.is_dense());
}

#[test]
fn noise_update_cases() {
    let phi = phi_small();
    let y = DVector::from_vec(vec![0.3, -1.0, 0.5]);
    let q =
        GaussianPosterior::diagonal(DVector::zeros(4), DVector::from_element(4, 1e-300)).unwrap();
    assert_relative_eq!(
        update_noise_variance(&q, &phi, &y).unwrap(),
        y.norm_squared() / 3.0,
        epsilon = 1e-15
    );

    // Interpolating mean + null-space direction leaves the ε tr(ΦΦᵀ)/N floor.
    let mut phi = phi.clone();
    phi.column_mut(3).fill(0.0);
    let mean = phi.clone().pseudo_inverse(1e-14).unwrap() * &y;
    assert_relative_eq!(&phi * &mean, y.clone(), epsilon = 1e-12);
    let eps = 1e-6;
    let q = GaussianPosterior::rank_one(mean, DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0]), eps)
        .unwrap();
    let got = update_noise_variance(&q, &phi, &y).unwrap();
    assert_relative_eq!(
        got,
        eps * (&phi * phi.transpose()).trace() / 3.0,
        max_relative = 1e-8
    );

    let zero =
        GaussianPosterior::diagonal(DVector::zeros(4), DVector::from_element(4, 1e-300)).unwrap();
    assert!(matches!(
        update_noise_variance(&zero, &DMatrix::zeros(3, 4), &DVector::zeros(3)),
        Err(Error::NoiseVarianceUnderflow)
    ));
}

#[test]
fn grad_v_cases() {
    let phi = phi_small();
    let g = grad_v(&DVector::zeros(4), &phi, 0.1, 1e-6).unwrap();
    assert_eq!(g, DVector::zeros(4));
}

#[test]
fn optimal_direction_lands_in_null_space() {
    let phi = phi_small();
    let eps = 1e-6;
    let start = DVector::from_vec(vec![0.2, 0.4, -0.1, 1.0]);
    let v = optimal_rank_one_direction(&start, &phi, 0.05, 1.0, 1.0, eps).unwrap();
    let d = collapse_diagnostics(&v, &phi, eps).unwrap();
    assert!(d.alignment < 1e-14, "{d:?}");
    assert!(d.norm_gap.abs() < 1e-14, "{d:?}");
    let g = grad_v(&v, &phi, 0.05, eps).unwrap();
    assert!(g.amax() < 1e-12);
    // Starting inside the row space falls back to a basis vector.
    let row = phi.row(0).transpose();
    let v = optimal_rank_one_direction(&row, &phi, 0.05, 1.0, 1.0, eps).unwrap();
    assert!(collapse_diagnostics(&v, &phi, eps).unwrap().alignment < 1e-12);
}

#[test]
fn optimal_direction_without_null_space() {
    // R < N: the best direction is the weakest right singular vector.
    let phi = phi_small().transpose();
    let (noise, tau, t, eps) = (0.2, 1.3, 0.7, 1e-4);
    let start = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let v = optimal_rank_one_direction(&start, &phi, noise, tau, t, eps).unwrap();
    let g = grad_v_tempered(&v, &phi, noise, tau, t, eps).unwrap();
    assert!(g.amax() < 1e-10, "{g}");
    // Beats any other direction with its own optimal norm.
    let objective = |v: &DVector<f64>| {
        let m = phi.tr_mul(&phi) / (t * noise);
        -0.5 * v.dot(&(m * v)) - 0.5 * v.norm_squared() / tau + 0.5 * (v.norm_squared() + eps).ln()
    };
    for dir in [
        DVector::from_vec(vec![1.0, 0.0, 0.0]),
        DVector::from_vec(vec![0.3, -0.7, 0.2]),
    ] {
        let u = dir.normalize();
        let lam = u.dot(&(phi.tr_mul(&phi) * &u)) / (t * noise) + 1.0 / tau;
        let w = u * (1.0 / lam - eps).sqrt();
        assert!(objective(&v) >= objective(&w) - 1e-12);
    }
}

#[test]
fn collapse_diagnostics_cases() {
    let mut phi = phi_small();
    phi.column_mut(3).fill(0.0);
    let eps: f64 = 1e-6;
    let v = DVector::from_vec(vec![0.0, 0.0, 0.0, (1.0 - eps).sqrt()]);
    let d = collapse_diagnostics(&v, &phi, eps).unwrap();
    assert_eq!(d.alignment, 0.0);
    assert_relative_eq!(d.norm_gap, 0.0, epsilon = 1e-15);
    let row = phi.row(0).transpose();
    assert!(collapse_diagnostics(&row, &phi, eps).unwrap().alignment > 0.0);
    // Zero vector does not divide by zero.
    assert_eq!(
        collapse_diagnostics(&DVector::zeros(4), &phi, eps)
            .unwrap()
            .alignment,
        0.0
    );
}

#[test]
fn degenerate_objective_cases() {
    let phi = phi_small();
    let y = DVector::zeros(3);
    let got = degenerate_map_objective(&DVector::zeros(4), &phi, &y, 0.2).unwrap();
    assert_relative_eq!(
        got,
        -1.5 * (std::f64::consts::TAU * 0.2).ln(),
        epsilon = 1e-14
    );

    // Interpolating mean: halving σ_y² raises the objective by (N/2) log 2.
    let y = DVector::from_vec(vec![0.3, -1.0, 0.5]);
    let mean = phi.clone().pseudo_inverse(1e-14).unwrap() * &y;
    let a = degenerate_map_objective(&mean, &phi, &y, 1e-3).unwrap();
    let b = degenerate_map_objective(&mean, &phi, &y, 5e-4).unwrap();
    assert_relative_eq!(b - a, 1.5 * 2f64.ln(), epsilon = 1e-9);
}

#[test]
fn prior_scale_cases() {
    let q = GaussianPosterior::diagonal(DVector::zeros(3), DVector::from_element(3, 0.42)).unwrap();
    assert_relative_eq!(update_prior_scale(&q), 0.42, epsilon = 1e-15);
    let mean = DVector::from_vec(vec![0.5, -0.5, 1.0]);
    let eps = 1e-6;
    let q = GaussianPosterior::rank_one(mean.clone(), DVector::zeros(3), eps).unwrap();
    assert_relative_eq!(
        update_prior_scale(&q),
        eps + mean.norm_squared() / 3.0,
        epsilon = 1e-15
    );
    assert_relative_eq!(
        elbo_grad_log_prior_scale(&q, update_prior_scale(&q)),
        0.0,
        epsilon = 1e-12
    );
}

#[test]
fn tempering_scales_only_the_likelihood() {
    let phi = phi_small();
    let y = DVector::from_vec(vec![0.3, -1.0, 0.5]);
    let q = GaussianPosterior::diagonal(
        DVector::from_vec(vec![0.1, 0.2, -0.3, 0.0]),
        DVector::from_vec(vec![0.5, 0.4, 0.3, 0.2]),
    )
    .unwrap();
    let ell = expected_log_likelihood(&q, &phi, &y, 0.3).unwrap();
    let kl = kl_to_prior(&q, 1.2).unwrap();
    for t in [0.5, 1.0, 4.0] {
        assert_relative_eq!(
            elbo(&q, &phi, &y, &hyper(0.3, 1.2, t)).unwrap(),
            ell / t - kl,
            epsilon = 1e-13
        );
    }
}

#[test]
fn feature_gradient_matches_finite_differences() {
    let phi = phi_small();
    let y = DVector::from_vec(vec![0.3, -1.0, 0.5]);
    let h = hyper(0.3, 1.2, 1.5);
    let mean = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
    let qs = [
        GaussianPosterior::diagonal(mean.clone(), DVector::from_vec(vec![0.5, 0.4, 0.3, 0.2]))
            .unwrap(),
        GaussianPosterior::rank_one(
            mean.clone(),
            DVector::from_vec(vec![0.3, -0.1, 0.2, 0.5]),
            1e-3,
        )
        .unwrap(),
        GaussianPosterior::full_rank(
            mean.clone(),
            update_full_covariance(&phi, 0.4, 1.0, 1.0).unwrap(),
        )
        .unwrap(),
    ];
    let step = 1e-6;
    for q in &qs {
        let g = elbo_grad_features(q, &phi, &y, &h).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut pp = phi.clone();
                let mut pm = phi.clone();
                pp[(i, j)] += step;
                pm[(i, j)] -= step;
                let fd =
                    (elbo(q, &pp, &y, &h).unwrap() - elbo(q, &pm, &y, &h).unwrap()) / (2.0 * step);
                assert_relative_eq!(g[(i, j)], fd, epsilon = 1e-7);
            }
        }
    }
}

#[test]
fn generic_over_single_precision() {
    let phi = phi_small().map(|v| v as f32);
    let y = DVector::from_vec(vec![0.3f32, -1.0, 0.5]);
    let h = Hyperparameters::<f32>::unit();
    let mean = update_mean(&phi, &y, 1.0, 1.0, 1.0).unwrap();
    let cov = update_full_covariance(&phi, 1.0, 1.0, 1.0).unwrap();
    let q = GaussianPosterior::full_rank(mean, cov).unwrap();
    let j = elbo(&q, &phi, &y, &h).unwrap();
    let lml = crate::model::log_marginal_likelihood(&phi, &y, &h).unwrap();
    assert!((j - lml).abs() < 1e-4, "{j} vs {lml}");
}
