//! Least-squares working mean models and the shared Wald test.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::stats::two_sided_p;

/// Smallest singular value allowed relative to the largest.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Test families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cmm,
    Augmented,
    ApproxExact,
    ApproxExactBz,
    Exact,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Cmm,
        Method::Augmented,
        Method::ApproxExact,
        Method::ApproxExactBz,
        Method::Exact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cmm => "cmm",
            Method::Augmented => "augmented",
            Method::ApproxExact => "approx-exact",
            Method::ApproxExactBz => "approx-exact-bz",
            Method::Exact => "exact",
        }
    }

    /// Whether the method tests the strong null (treatment excluded from adjustment).
    pub fn is_randomization(self) -> bool {
        matches!(self, Method::ApproxExact | Method::ApproxExactBz | Method::Exact)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Outcome of one hypothesis test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: Method,
    pub statistic: f64,
    /// Absent for the permutation test.
    pub std_error: Option<f64>,
    pub z_value: Option<f64>,
    pub p_value: f64,
    pub adjustment: String,
}

/// Wald test against the standard normal.
pub fn wald_test(estimate: f64, std_error: f64, method: Method) -> Result<TestResult> {
    if !(std_error > 0.0) || !std_error.is_finite() {
        return Err(Error::NonPositiveStdError(std_error));
    }
    let z = estimate / std_error;
    Ok(TestResult {
        method,
        statistic: estimate,
        std_error: Some(std_error),
        z_value: Some(z),
        p_value: two_sided_p(z),
        adjustment: String::new(),
    })
}

/// Raw least-squares solution.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rss: f64,
    pub tss: f64,
    pub r2: f64,
}

/// Least squares through an SVD. The caller supplies any intercept column.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (rows, cols) = x.shape();
    if rows != y.len() {
        return Err(Error::InvalidData(format!(
            "design has {rows} rows but response has {}",
            y.len()
        )));
    }
    if rows <= cols {
        return Err(Error::TooFewRows { rows, cols });
    }
    let svd = SVD::new(x.clone(), true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if !(smax > 0.0) || smin < RANK_TOLERANCE * smax {
        return Err(Error::RankDeficient(offending_columns(&svd, smax)));
    }
    let coefficients = svd
        .solve(y, 0.0)
        .map_err(|e| Error::Singular(e.to_string()))?;
    let fitted = x * &coefficients;
    let residuals = y - &fitted;
    let rss = residuals.norm_squared();
    let ybar = y.mean();
    let tss = y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>();
    let r2 = if tss > 0.0 {
        (1.0 - rss / tss).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(OlsFit {
        coefficients,
        fitted,
        residuals,
        rss,
        tss,
        r2,
    })
}

fn offending_columns(svd: &SVD<f64, nalgebra::Dyn, nalgebra::Dyn>, smax: f64) -> Vec<usize> {
    let Some(vt) = svd.v_t.as_ref() else {
        return Vec::new();
    };
    let mut cols = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s < RANK_TOLERANCE * smax || smax == 0.0 {
            for (j, v) in vt.row(k).iter().enumerate() {
                if v.abs() > 0.1 && !cols.contains(&j) {
                    cols.push(j);
                }
            }
        }
    }
    cols.sort_unstable();
    cols
}

/// Working mean model d(X; η): intercept, optional treatment term, selected covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedMeanModel {
    /// Covariate indices, in entry order.
    pub selected: Vec<usize>,
    /// Intercept followed by one coefficient per selected covariate.
    pub eta: Vec<f64>,
    /// Treatment coefficient when the model was fit with treatment.
    pub treatment_coef: Option<f64>,
    pub rss: f64,
    pub n_obs: usize,
    pub r2: f64,
}

impl FittedMeanModel {
    /// Maps an OLS coefficient vector laid out as `[intercept, (treatment), covariates…]`.
    pub fn from_coefficients(
        selected: Vec<usize>,
        include_treatment: bool,
        coefficients: &DVector<f64>,
        rss: f64,
        n_obs: usize,
        r2: f64,
    ) -> Self {
        let offset = if include_treatment { 2 } else { 1 };
        debug_assert_eq!(coefficients.len(), offset + selected.len());
        let mut eta = Vec::with_capacity(1 + selected.len());
        eta.push(coefficients[0]);
        eta.extend(coefficients.iter().skip(offset));
        Self {
            selected,
            eta,
            treatment_coef: include_treatment.then(|| coefficients[1]),
            rss,
            n_obs,
            r2,
        }
    }

    /// Intercept-only model with the given level.
    pub fn constant(level: f64, n_obs: usize) -> Self {
        Self {
            selected: Vec::new(),
            eta: vec![level],
            treatment_coef: None,
            rss: 0.0,
            n_obs,
            r2: 0.0,
        }
    }

    pub fn includes_treatment(&self) -> bool {
        self.treatment_coef.is_some()
    }

    /// Number of non-intercept covariate terms.
    pub fn n_covariates(&self) -> usize {
        self.selected.len()
    }

    pub fn predict(&self, covariates: &[f64], treatment: u8) -> f64 {
        let mut v = self.eta[0]
            + self
                .selected
                .iter()
                .zip(&self.eta[1..])
                .map(|(&k, b)| b * covariates[k])
                .sum::<f64>();
        if let Some(t) = self.treatment_coef {
            v += t * treatment as f64;
        }
        v
    }

    pub fn check_indices(&self, p: usize) -> Result<()> {
        match self.selected.iter().find(|&&k| k >= p) {
            Some(&index) => Err(Error::CovariateIndex {
                index,
                available: p,
            }),
            None => Ok(()),
        }
    }
}

/// Unit-level design `[1, (A), x_selected…]` and response, rows in cluster order.
pub fn design_matrix(
    data: &TrialDataset,
    covariates: &[usize],
    include_treatment: bool,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = data.n_covariates();
    if let Some(&index) = covariates.iter().find(|&&k| k >= p) {
        return Err(Error::CovariateIndex {
            index,
            available: p,
        });
    }
    let n = data.n_units();
    let offset = if include_treatment { 2 } else { 1 };
    let mut x = DMatrix::zeros(n, offset + covariates.len());
    let mut y = DVector::zeros(n);
    let mut row = 0;
    for c in data.clusters() {
        for u in &c.units {
            x[(row, 0)] = 1.0;
            if include_treatment {
                x[(row, 1)] = c.treatment as f64;
            }
            for (j, &k) in covariates.iter().enumerate() {
                x[(row, offset + j)] = u.covariates[k];
            }
            y[row] = u.outcome;
            row += 1;
        }
    }
    Ok((x, y))
}

/// Fits `outcome ~ 1 + (A) + covariates` by OLS at the unit level.
pub fn fit_mean_model(
    data: &TrialDataset,
    covariates: &[usize],
    include_treatment: bool,
) -> Result<FittedMeanModel> {
    let (x, y) = design_matrix(data, covariates, include_treatment)?;
    let fit = ols_fit(&x, &y)?;
    Ok(FittedMeanModel::from_coefficients(
        covariates.to_vec(),
        include_treatment,
        &fit.coefficients,
        fit.rss,
        y.len(),
        fit.r2,
    ))
}

/// Per-cluster residual vectors `y − d(x; η̂)`.
pub fn residuals(model: &FittedMeanModel, data: &TrialDataset) -> Result<Vec<Vec<f64>>> {
    model.check_indices(data.n_covariates())?;
    Ok(data
        .clusters()
        .iter()
        .map(|c| {
            c.units
                .iter()
                .map(|u| u.outcome - model.predict(&u.covariates, c.treatment))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(y: &[f64], x: &[Vec<f64>]) -> TrialDataset {
        let a: Vec<u8> = (0..y.len()).map(|i| (i % 2) as u8).collect();
        TrialDataset::from_scalar(y, &a, x).unwrap()
    }

    #[test]
    fn exact_line() {
        let xs: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x).collect();
        let d = scalar(&y, &xs.iter().map(|&x| vec![x]).collect::<Vec<_>>());
        let m = fit_mean_model(&d, &[0], false).unwrap();
        assert!((m.eta[0] - 2.0).abs() < 1e-12 && (m.eta[1] - 3.0).abs() < 1e-12);
        assert!(m.rss < 1e-20);
        assert!((m.r2 - 1.0).abs() < 1e-12);
        let r = residuals(&m, &d).unwrap();
        assert!(r.iter().flatten().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn constant_response() {
        let x: Vec<Vec<f64>> = (0..7).map(|i| vec![(i * i) as f64, (i as f64).sin()]).collect();
        let d = scalar(&[4.0; 7], &x);
        let m = fit_mean_model(&d, &[0, 1], false).unwrap();
        assert!((m.eta[0] - 4.0).abs() < 1e-10);
        assert!(m.eta[1].abs() < 1e-10 && m.eta[2].abs() < 1e-10);
        assert_eq!(m.r2, 0.0);
    }

    #[test]
    fn matches_normal_equations() {
        // Independent route: Gaussian elimination on XᵀX β = Xᵀy.
        let x = DMatrix::from_row_slice(5, 3, &[1.0, 0.5, 2.0, 1.0, 1.5, -1.0, 1.0, 2.0, 0.3, 1.0, 3.1, 1.1, 1.0, 4.0, -2.0]);
        let y = DVector::from_vec(vec![1.0, 2.5, 0.7, 3.3, 6.1]);
        let fit = ols_fit(&x, &y).unwrap();
        let mut a = x.transpose() * &x;
        let mut b = x.transpose() * &y;
        let n = 3;
        for i in 0..n {
            let piv = a[(i, i)];
            for j in (i + 1)..n {
                let f = a[(j, i)] / piv;
                for k in i..n {
                    a[(j, k)] -= f * a[(i, k)];
                }
                b[j] -= f * b[i];
            }
        }
        let mut beta = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|k| a[(i, k)] * beta[k]).sum();
            beta[i] = (b[i] - s) / a[(i, i)];
        }
        for i in 0..n {
            assert!((fit.coefficients[i] - beta[i]).abs() < 1e-10);
        }
        let ortho = x.transpose() * &fit.residuals;
        assert!(ortho.amax() < 1e-8 * y.norm());
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0, 1.0, 4.0, 8.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 5.0]);
        match ols_fit(&x, &y) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, vec![1, 2]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        assert!(matches!(
            ols_fit(&DMatrix::zeros(2, 2), &DVector::zeros(2)),
            Err(Error::TooFewRows { .. })
        ));
    }

    #[test]
    fn intercept_only_residuals_are_centered_outcomes() {
        let y = [1.0, 5.0, 2.0, 8.0];
        let d = scalar(&y, &vec![vec![]; 4]);
        let m = fit_mean_model(&d, &[], false).unwrap();
        let r: Vec<f64> = residuals(&m, &d).unwrap().concat();
        for (ri, yi) in r.iter().zip(y) {
            assert!((ri - (yi - 4.0)).abs() < 1e-12);
        }
        assert!(r.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn control_arm_model_applied_to_all_units() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, ((i * 7) % 5) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 0.5 * v[0] - v[1] + (v[0] * 1.3).cos()).collect();
        let d = scalar(&y, &x);
        let m = fit_mean_model(&d.arm(0).unwrap(), &[0, 1], false).unwrap();
        let r = residuals(&m, &d).unwrap();
        for (i, ri) in r.iter().enumerate() {
            let direct = y[i] - (m.eta[0] + m.eta[1] * x[i][0] + m.eta[2] * x[i][1]);
            assert!((ri[0] - direct).abs() < 1e-12);
        }
        let bad = FittedMeanModel {
            selected: vec![5],
            ..m
        };
        assert!(matches!(residuals(&bad, &d), Err(Error::CovariateIndex { index: 5, .. })));
    }

    #[test]
    fn wald_reference_values() {
        let r = wald_test(0.413, 0.064, Method::Cmm).unwrap();
        let z = r.z_value.unwrap();
        // 0.413 ± 0.0005 over 0.064 ± 0.0005 brackets the tabulated 6.450.
        assert!((z - 6.450).abs() < 0.06, "z = {z}");
        assert!(r.p_value < 1e-4);
        let r0 = wald_test(0.0, 0.3, Method::Cmm).unwrap();
        assert_eq!(r0.z_value, Some(0.0));
        assert_eq!(r0.p_value, 1.0);
        let r1 = wald_test(1.96, 1.0, Method::Cmm).unwrap();
        assert!((r1.p_value - 0.05).abs() < 5e-4);
        assert!(matches!(wald_test(1.0, 0.0, Method::Cmm), Err(Error::NonPositiveStdError(_))));
        assert!(wald_test(1.0, -1.0, Method::Cmm).is_err());
    }

    proptest! {
        #[test]
        fn wald_p_symmetric(est in -10.0f64..10.0, se in 0.01f64..5.0) {
            let a = wald_test(est, se, Method::Augmented).unwrap();
            let b = wald_test(-est, se, Method::Augmented).unwrap();
            prop_assert!((a.p_value - b.p_value).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a.p_value));
        }

        #[test]
        fn rescaling_covariate_rescales_coefficient(c in 0.1f64..50.0, seed in 0u64..1000) {
            let n = 12;
            let x: Vec<Vec<f64>> = (0..n).map(|i| {
                let t = (i as f64 + seed as f64 * 0.37).sin();
                vec![t * 3.0 + 1.0, (t * 11.0).cos()]
            }).collect();
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * v[0] - v[1] + ((i * 13) % 7) as f64 * 0.1).collect();
            let scaled: Vec<Vec<f64>> = x.iter().map(|v| vec![v[0] * c, v[1]]).collect();
            let m1 = fit_mean_model(&scalar(&y, &x), &[0, 1], false).unwrap();
            let m2 = fit_mean_model(&scalar(&y, &scaled), &[0, 1], false).unwrap();
            prop_assert!((m1.eta[1] / c - m2.eta[1]).abs() <= 1e-10 * m1.eta[1].abs().max(1.0));
            for i in 0..n {
                let f1 = m1.predict(&x[i], 0);
                let f2 = m2.predict(&scaled[i], 0);
                prop_assert!((f1 - f2).abs() <= 1e-10 * f1.abs().max(1.0));
            }
        }

        #[test]
        fn adding_covariate_never_increases_rss(seed in 0u64..1000) {
            let n = 15;
            let x: Vec<Vec<f64>> = (0..n).map(|i| {
                let s = seed as f64 + i as f64;
                vec![(s * 0.7).sin(), (s * 1.9).cos(), (s * 0.13).tan().clamp(-5.0, 5.0)]
            }).collect();
            let y: Vec<f64> = (0..n).map(|i| ((seed + i as u64) as f64 * 0.77).sin() * 3.0).collect();
            let d = scalar(&y, &x);
            let small = fit_mean_model(&d, &[0], false).unwrap();
            let big = fit_mean_model(&d, &[0, 2], false).unwrap();
            prop_assert!(big.rss <= small.rss * (1.0 + 1e-12) + 1e-14);
        }
    }
}
