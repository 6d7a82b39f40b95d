use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::scalar::{lit, Real};

/// Moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub first_moment: DVector<T>,
    pub second_moment: DVector<T>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub stability: T,
}

impl<T: Real> AdamState<T> {
    /// Zero moments with β₁ = 0.9, β₂ = 0.999 and stability constant 1e-8.
    pub fn new(dim: usize) -> Self {
        Self::with_betas(dim, lit(0.9), lit(0.999), lit(1e-8))
    }

    pub fn with_betas(dim: usize, beta1: T, beta2: T, stability: T) -> Self {
        Self {
            first_moment: DVector::zeros(dim),
            second_moment: DVector::zeros(dim),
            step: 0,
            beta1,
            beta2,
            stability,
        }
    }

    pub fn dim(&self) -> usize {
        self.first_moment.len()
    }

    /// In-place descent step `params -= lr · m̂ / (√v̂ + stability)`.
    pub fn step_mut(&mut self, params: &mut DVector<T>, grad: &DVector<T>, lr: T) -> Result<()> {
        check_dim("adam params", self.dim(), params.len())?;
        check_dim("adam gradient", self.dim(), grad.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adam gradient"));
        }
        self.step += 1;
        let one = T::one();
        let t = self.step as i32;
        let bias1 = one - self.beta1.powi(t);
        let bias2 = one - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (one - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (one - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bias1;
            let v_hat = self.second_moment[i] / bias2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.stability);
        }
        Ok(())
    }
}

/// One Adam descent step, returning the new parameters and state.
pub fn adam_step<T: Real>(
    state: &AdamState<T>,
    params: &DVector<T>,
    grad: &DVector<T>,
    lr: T,
) -> Result<(DVector<T>, AdamState<T>)> {
    let mut next = state.clone();
    let mut p = params.clone();
    next.step_mut(&mut p, grad, lr)?;
    Ok((p, next))
}

/// `lr₀ · ½ (1 + cos(π · step / total))`.
pub fn cosine_lr<T: Real>(step: usize, total: usize, base_lr: T) -> Result<T> {
    if total == 0 {
        return Err(Error::InvalidArgument(
            "cosine schedule needs total >= 1".into(),
        ));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!(
            "cosine schedule step {step} exceeds total {total}"
        )));
    }
    let frac = lit::<T>(step as f64) / lit::<T>(total as f64);
    Ok(base_lr * lit::<T>(0.5) * (T::one() + (T::pi() * frac).cos()))
}
