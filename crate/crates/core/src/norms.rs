//! The p-norm, the 0-norm and the bounded-ℓp,0 norm
//! `Σ 1 − exp(−|x_i|^p / σ^p)` together with its gradient.
//!
//! The bounded norm interpolates between the scaled p-norm `‖x/σ‖_p^p`
//! (entries small relative to `σ`) and the 0-norm (`σ → 0⁺`). Every term lies
//! in `[0, 1)`, so the norm of an `n`-vector lies in `[0, n)`.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum NormError {
    #[error("p must be at least 1, got {0}")]
    InvalidP(f64),
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
}

/// Parameters of the bounded-ℓp,0 norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedNormParams {
    p: f64,
    sigma: f64,
}

impl BoundedNormParams {
    pub fn new(p: f64, sigma: f64) -> Result<Self, NormError> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(NormError::InvalidP(p));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(NormError::InvalidSigma(sigma));
        }
        Ok(BoundedNormParams { p, sigma })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `(|x| / σ)^p` in single precision.
    #[inline]
    fn scaled_power(&self, x: f32) -> f32 {
        let r = x.abs() / self.sigma as f32;
        if self.p == 1.0 {
            r
        } else if self.p == 2.0 {
            r * r
        } else {
            r.powf(self.p as f32)
        }
    }

    /// One term `1 − exp(−(|x|/σ)^p)`, computed with `exp_m1` so that small
    /// arguments keep their relative precision.
    #[inline]
    pub fn term(&self, x: f32) -> f32 {
        -(-self.scaled_power(x)).exp_m1()
    }

    /// `d/dx [1 − exp(−|x|^p/σ^p)] = sign(x)·p·|x|^{p−1}/σ^p·exp(−|x|^p/σ^p)`,
    /// with the convention `sign(0) = 0`.
    #[inline]
    pub fn term_grad(&self, x: f32) -> f32 {
        if x == 0.0 {
            return 0.0;
        }
        let sigma = self.sigma as f32;
        let r = x.abs() / sigma;
        let slope = if self.p == 1.0 {
            1.0 / sigma
        } else {
            self.p as f32 * r.powf(self.p as f32 - 1.0) / sigma
        };
        x.signum() * slope * (-self.scaled_power(x)).exp()
    }
}

/// `(Σ |x_i|^p)^(1/p)`; zero for an empty vector.
pub fn p_norm(x: &[f32], p: f64) -> Result<f32, NormError> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(NormError::InvalidP(p));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = if p == 1.0 {
        x.iter().map(|&v| v.abs() as f64).sum()
    } else {
        x.iter().map(|&v| (v.abs() as f64).powf(p)).sum()
    };
    Ok(sum.powf(1.0 / p) as f32)
}

/// Number of entries that are not exactly zero.
pub fn zero_norm(x: &[f32]) -> usize {
    x.iter().filter(|&&v| v != 0.0).count()
}

/// `Σ 1 − exp(−|x_i|^p / σ^p)`.
pub fn bounded_norm(x: &[f32], params: BoundedNormParams) -> f32 {
    x.iter().map(|&v| params.term(v) as f64).sum::<f64>() as f32
}

/// Component-wise gradient of [`bounded_norm`].
pub fn bounded_norm_grad(x: &[f32], params: BoundedNormParams) -> Vec<f32> {
    x.iter().map(|&v| params.term_grad(v)).collect()
}
