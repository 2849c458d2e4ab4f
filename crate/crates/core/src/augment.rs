//! Marginal treatment model `g(A; β) = β₀ + β₁A` fitted by augmented
//! estimating equations, with arm-specific working models and the
//! finite-sample correction factor on the sandwich variance.

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::data::{cluster_average, TrialDataset};
use crate::error::{Error, Result};
use crate::gee::{gee_fit, CorrStructure, GeeOptions, MeanModelSpec, WorkingCovariance};
use crate::regression::{fit_mean_model, wald_test, FittedMeanModel, Method, TestResult};
use crate::stats::symmetrize;

#[derive(Debug, Clone)]
pub struct AugmentedFit {
    /// `(β₀, β₁)`.
    pub beta: Vector2<f64>,
    /// Working models for arm 0 and arm 1.
    pub arm_models: [FittedMeanModel; 2],
    /// Per-cluster augmented estimating functions at `β̂`.
    pub scores: Vec<Vector2<f64>>,
    /// `Σ DᵢᵀVᵢ⁻¹Dᵢ`.
    pub bread: Matrix2<f64>,
    pub working: WorkingCovariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    /// Use the clustered estimating equations; otherwise clusters are averaged first.
    pub clustered: bool,
    pub working: CorrStructure,
    /// Apply the correction factor in the clustered variance as well.
    pub correct_clustered: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            clustered: false,
            working: CorrStructure::Independence,
            correct_clustered: true,
        }
    }
}

fn h(a: u8) -> Vector2<f64> {
    Vector2::new(1.0, a as f64)
}

/// One working model per arm, each fit on that arm's units without the treatment term.
pub fn fit_arm_models<F>(data: &TrialDataset, mut select: F) -> Result<[FittedMeanModel; 2]>
where
    F: FnMut(&TrialDataset, u8) -> Result<FittedMeanModel>,
{
    let mut fit = |a: u8| -> Result<FittedMeanModel> {
        let arm = data.arm(a)?;
        let model = select(&arm, a)?;
        if model.includes_treatment() {
            return Err(Error::InvalidSpec("arm model must not contain treatment".into()));
        }
        Ok(model)
    };
    Ok([fit(0)?, fit(1)?])
}

/// Arm models over a fixed covariate list.
pub fn fit_arm_models_fixed(data: &TrialDataset, covariates: &[usize]) -> Result<[FittedMeanModel; 2]> {
    fit_arm_models(data, |arm, _| fit_mean_model(arm, covariates, false))
}

/// Solves `Σᵢ ψ_a(Oᵢ; β) = 0` where
/// `ψ_a = DᵢᵀVᵢ⁻¹(Yᵢ − Dᵢβ) − Σ_a {I(Aᵢ=a) − π_a} Dᵢ(a)ᵀVᵢ⁻¹{d(Xᵢ; η_a) − Dᵢ(a)β}`.
pub fn augmented_solve(
    data: &TrialDataset,
    arm_models: &[FittedMeanModel; 2],
    working: &WorkingCovariance,
) -> Result<AugmentedFit> {
    for a in 0..2u8 {
        if data.n_arm(a) == 0 {
            return Err(Error::EmptyArm(a));
        }
        arm_models[a as usize].check_indices(data.n_covariates())?;
    }
    working.validate(data.max_cluster_size())?;
    let n = data.n_clusters() as f64;
    let pi = [data.n_control() as f64 / n, data.n_treated() as f64 / n];

    // Every Dᵢ(a) is 1·h(a)ᵀ, so each term reduces to 1ᵀVᵢ⁻¹ applied to a vector.
    struct Parts {
        r: Vector2<f64>,
        m: Matrix2<f64>,
    }
    let mut parts = Vec::with_capacity(data.n_clusters());
    let mut lhs = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    let mut bread = Matrix2::zeros();
    for c in data.clusters() {
        let ones = vec![1.0; c.units.len()];
        let w = working.ones_inverse(&ones);
        let y: Vec<f64> = c.units.iter().map(|u| u.outcome).collect();
        let hi = h(c.treatment);
        let mut r = hi * working.ones_inverse(&y);
        let mut m = hi * hi.transpose() * w;
        bread += hi * hi.transpose() * w;
        for a in 0..2u8 {
            let weight = if c.treatment == a { 1.0 } else { 0.0 } - pi[a as usize];
            let model = &arm_models[a as usize];
            let d: Vec<f64> = c.units.iter().map(|u| model.predict(&u.covariates, 0)).collect();
            let ha = h(a);
            r -= ha * (weight * working.ones_inverse(&d));
            m -= ha * ha.transpose() * (weight * w);
        }
        lhs += m;
        rhs += r;
        parts.push(Parts { r, m });
    }
    let beta = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("augmented estimating equations".into()))?;
    let scores = parts.iter().map(|p| p.r - p.m * beta).collect();
    Ok(AugmentedFit {
        beta,
        arm_models: arm_models.clone(),
        scores,
        bread,
        working: *working,
    })
}

/// `C = {(n₀−p₀−1)⁻¹ + (n₁−p₁−1)⁻¹} / {(n₀−1)⁻¹ + (n₁−1)⁻¹}`.
pub fn correction_factor(n: [usize; 2], p: [usize; 2]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for a in 0..2 {
        let (na, pa) = (n[a], p[a]);
        if na < pa + 2 {
            return Err(Error::ArmTooRich {
                arm: a as u8,
                n: na,
                p: pa,
            });
        }
        num += 1.0 / (na - pa - 1) as f64;
        den += 1.0 / (na - 1) as f64;
    }
    Ok(num / den)
}

/// Arm sizes entering the correction factor: clusters for scalar data, units otherwise.
fn arm_sizes(data: &TrialDataset) -> [usize; 2] {
    let mut n = [0usize; 2];
    for c in data.clusters() {
        n[c.treatment as usize] += c.units.len();
    }
    n
}

/// Uncorrected sandwich `B⁻¹ (Σ ψψᵀ) B⁻ᵀ`.
pub fn augmented_sandwich(fit: &AugmentedFit) -> Result<Matrix2<f64>> {
    let inv = fit
        .bread
        .try_inverse()
        .ok_or_else(|| Error::Singular("augmented bread".into()))?;
    let meat: Matrix2<f64> = fit.scores.iter().map(|s| s * s.transpose()).sum();
    Ok(inv * meat * inv.transpose())
}

/// Corrected variance `C · B⁻¹ (Σ ψψᵀ) B⁻ᵀ`, with the factor C used.
pub fn augmented_variance(
    data: &TrialDataset,
    fit: &AugmentedFit,
    apply_correction: bool,
) -> Result<(DMatrix<f64>, f64)> {
    let p = [fit.arm_models[0].n_covariates(), fit.arm_models[1].n_covariates()];
    let c = correction_factor(arm_sizes(data), p)?;
    let c = if apply_correction { c } else { 1.0 };
    let v = augmented_sandwich(fit)? * c;
    let v = DMatrix::from_iterator(2, 2, v.iter().copied());
    Ok((symmetrize(&v), c))
}

/// Working covariance for the clustered equations, estimated from the marginal model.
fn marginal_working(data: &TrialDataset, structure: CorrStructure) -> Result<WorkingCovariance> {
    match structure {
        CorrStructure::Independence => Ok(WorkingCovariance::independence()),
        CorrStructure::Exchangeable => {
            let spec = MeanModelSpec {
                covariates: Vec::new(),
                include_treatment: true,
            };
            let start = WorkingCovariance::exchangeable(1.0, 0.0);
            Ok(gee_fit(data, &spec, &start, &GeeOptions::default())?.working)
        }
    }
}

/// Augmented fit with arm models from `select`, after averaging clusters when not clustered.
pub fn augmented_fit<F>(
    data: &TrialDataset,
    select: F,
    opts: &AugmentOptions,
) -> Result<(AugmentedFit, DMatrix<f64>, f64)>
where
    F: FnMut(&TrialDataset, u8) -> Result<FittedMeanModel>,
{
    let averaged;
    let data = if !opts.clustered && !data.is_singleton() {
        averaged = cluster_average(data);
        &averaged
    } else {
        data
    };
    let working = if opts.clustered {
        marginal_working(data, opts.working)?
    } else {
        WorkingCovariance::independence()
    };
    let arm_models = fit_arm_models(data, select)?;
    let fit = augmented_solve(data, &arm_models, &working)?;
    let apply = !opts.clustered || data.is_singleton() || opts.correct_clustered;
    let (variance, c) = augmented_variance(data, &fit, apply)?;
    Ok((fit, variance, c))
}

/// Wald test of `β₁` from the augmented equations.
pub fn augmented_test<F>(data: &TrialDataset, select: F, opts: &AugmentOptions) -> Result<TestResult>
where
    F: FnMut(&TrialDataset, u8) -> Result<FittedMeanModel>,
{
    let (fit, variance, _) = augmented_fit(data, select, opts)?;
    wald_test(fit.beta[1], variance[(1, 1)].max(0.0).sqrt(), Method::Augmented)
}
