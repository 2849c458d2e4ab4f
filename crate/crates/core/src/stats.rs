//! Standard normal helpers and small dense-matrix utilities.

use nalgebra::DMatrix;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail P(Z > x).
pub fn normal_sf(x: f64) -> f64 {
    normal_cdf(-x)
}

/// Two-sided p-value P(|Z| ≥ |z|).
pub fn two_sided_p(z: f64) -> f64 {
    (2.0 * normal_sf(z.abs())).min(1.0)
}

/// Inverse of a symmetric positive definite matrix, falling back to LU.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.inverse());
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_reference_values() {
        let c = normal_cdf(1.959_963_984_540_054);
        assert!((c - 0.975).abs() < 1e-10, "{c}");
        assert!((two_sided_p(1.96) - 0.049_995_790_296_440_87).abs() < 1e-10);
        assert_eq!(two_sided_p(0.0), 1.0);
        assert_eq!(normal_cdf(f64::INFINITY), 1.0);
        assert!((normal_pdf(0.0) - 0.398_942_280_401_432_7).abs() < 1e-16);
    }
}
