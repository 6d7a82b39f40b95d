use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::scalar::{lit, Real};

/// Variance of the additive observation noise in the synthetic data.
pub const SYNTHETIC_NOISE_VARIANCE: f64 = 0.01;

/// Noise-free regression target.
pub fn synthetic_signal(x: f64) -> f64 {
    (3.0 * x).sin()
}

/// `x ~ N(0, 1)`, `y = sin(3x) + ε` with `ε ~ N(0, 0.01)`.
///
/// Inputs and noise come from separate ChaCha8 streams of the same seed, so
/// the first `n` inputs do not depend on `n`.
pub fn generate_synthetic<T: Real>(seed: u64, n: usize) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dataset size must be at least 1".into(),
        ));
    }
    let mut x_rng = ChaCha8Rng::seed_from_u64(seed);
    x_rng.set_stream(0);
    let mut e_rng = ChaCha8Rng::seed_from_u64(seed);
    e_rng.set_stream(1);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE_VARIANCE.sqrt()).expect("valid noise scale");
    let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut x_rng)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| synthetic_signal(x) + noise.sample(&mut e_rng))
        .collect();
    Dataset::new(
        DMatrix::from_iterator(n, 1, xs.iter().map(|&v| lit::<T>(v))),
        DVector::from_iterator(n, ys.iter().map(|&v| lit::<T>(v))),
    )
}
