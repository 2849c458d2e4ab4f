//! Conditional mean model fitted by generalized estimating equations with an
//! identity link, independence or exchangeable working correlation, and the
//! robust sandwich covariance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::regression::{design_matrix, ols_fit, wald_test, Method, TestResult};
use crate::stats::{spd_inverse, symmetrize};

/// Distance kept from the boundary of the positive-definite range of α.
pub const ALPHA_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrStructure {
    Independence,
    Exchangeable,
}

impl CorrStructure {
    pub fn name(self) -> &'static str {
        match self {
            CorrStructure::Independence => "indep",
            CorrStructure::Exchangeable => "exch",
        }
    }
}

impl fmt::Display for CorrStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorrStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indep" | "independence" => Ok(CorrStructure::Independence),
            "exch" | "exchangeable" => Ok(CorrStructure::Exchangeable),
            _ => Err(Error::Config(format!("unknown working correlation `{s}`"))),
        }
    }
}

/// Working covariance `Vᵢ = φ R(α)` of a cluster of size mᵢ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingCovariance {
    pub structure: CorrStructure,
    pub dispersion: f64,
    pub exch_alpha: f64,
}

impl WorkingCovariance {
    pub fn independence() -> Self {
        Self {
            structure: CorrStructure::Independence,
            dispersion: 1.0,
            exch_alpha: 0.0,
        }
    }

    pub fn exchangeable(dispersion: f64, exch_alpha: f64) -> Self {
        Self {
            structure: CorrStructure::Exchangeable,
            dispersion,
            exch_alpha,
        }
    }

    /// Open interval of α keeping R positive definite for clusters up to `max_size`.
    pub fn alpha_range(max_size: usize) -> (f64, f64) {
        if max_size <= 1 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (-1.0 / (max_size as f64 - 1.0), 1.0)
        }
    }

    fn alpha(&self) -> f64 {
        match self.structure {
            CorrStructure::Independence => 0.0,
            CorrStructure::Exchangeable => self.exch_alpha,
        }
    }

    pub fn validate(&self, max_size: usize) -> Result<()> {
        if !(self.dispersion > 0.0) || !self.dispersion.is_finite() {
            return Err(Error::NotPositiveDefinite(format!(
                "dispersion {} must be positive",
                self.dispersion
            )));
        }
        let (lo, hi) = Self::alpha_range(max_size);
        let a = self.alpha();
        if max_size > 1 && !(a > lo && a < hi) {
            return Err(Error::NotPositiveDefinite(format!(
                "exchangeable α = {a} outside ({lo}, {hi}) for cluster size {max_size}"
            )));
        }
        Ok(())
    }

    /// `V⁻¹ = a (I − c 11ᵀ)` for a cluster of size m.
    fn inverse_coefficients(&self, m: usize) -> (f64, f64) {
        let a = self.alpha();
        let scale = 1.0 / (self.dispersion * (1.0 - a));
        let c = a / (1.0 + (m as f64 - 1.0) * a);
        (scale, c)
    }

    /// V⁻¹ w.
    pub fn apply_inverse(&self, w: &[f64]) -> Vec<f64> {
        let (a, c) = self.inverse_coefficients(w.len());
        let s: f64 = w.iter().sum();
        w.iter().map(|v| a * (v - c * s)).collect()
    }

    /// 1ᵀ V⁻¹ w, the cluster score of a residual vector.
    pub fn ones_inverse(&self, w: &[f64]) -> f64 {
        let m = w.len() as f64;
        let s: f64 = w.iter().sum();
        s / (self.dispersion * (1.0 + (m - 1.0) * self.alpha()))
    }

    /// V for a cluster of size m.
    pub fn matrix(&self, m: usize) -> DMatrix<f64> {
        let a = self.alpha();
        DMatrix::from_fn(m, m, |i, j| {
            self.dispersion * if i == j { 1.0 } else { a }
        })
    }

    /// V⁻¹ for a cluster of size m.
    pub fn inverse(&self, m: usize) -> DMatrix<f64> {
        let (a, c) = self.inverse_coefficients(m);
        DMatrix::from_fn(m, m, |i, j| a * (if i == j { 1.0 } else { 0.0 } - c))
    }

    /// Symmetric square root of V⁻¹.
    pub fn inverse_sqrt(&self, m: usize) -> DMatrix<f64> {
        let (a, c) = self.inverse_coefficients(m);
        let mf = m as f64;
        // Eigenvalues: a(1 − c m) along 1, a on its orthogonal complement.
        let along = (a * (1.0 - c * mf)).sqrt();
        let ortho = a.sqrt();
        let k = (along - ortho) / mf;
        DMatrix::from_fn(m, m, |i, j| if i == j { ortho + k } else { k })
    }
}

/// Covariates and treatment flag of a working mean model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanModelSpec {
    pub covariates: Vec<usize>,
    pub include_treatment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeeOptions {
    /// Re-estimate φ and α from residuals, alternating with β until both settle.
    pub estimate_working: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self {
            estimate_working: true,
            max_iter: 50,
            tol: 1e-10,
        }
    }
}

impl GeeOptions {
    pub fn fixed() -> Self {
        Self {
            estimate_working: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeeFit {
    /// `[intercept, (treatment), covariates…]`.
    pub beta: DVector<f64>,
    pub robust_cov: DMatrix<f64>,
    pub naive_cov: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub working: WorkingCovariance,
    pub spec: MeanModelSpec,
}

impl GeeFit {
    pub fn treatment_index(&self) -> Option<usize> {
        self.spec.include_treatment.then_some(1)
    }
}

/// Unit-level design split into cluster row blocks.
pub(crate) struct ClusterBlocks {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub spans: Vec<(usize, usize)>,
}

impl ClusterBlocks {
    pub fn new(data: &TrialDataset, spec: &MeanModelSpec) -> Result<Self> {
        let (x, y) = design_matrix(data, &spec.covariates, spec.include_treatment)?;
        Ok(Self {
            x,
            y,
            spans: cluster_spans(data),
        })
    }

    pub fn residuals(&self, beta: &DVector<f64>) -> Vec<Vec<f64>> {
        let e = &self.y - &self.x * beta;
        self.spans
            .iter()
            .map(|&(s, m)| e.rows(s, m).iter().copied().collect())
            .collect()
    }
}

pub(crate) fn cluster_spans(data: &TrialDataset) -> Vec<(usize, usize)> {
    let mut start = 0;
    data.clusters()
        .iter()
        .map(|c| {
            let span = (start, c.units.len());
            start += c.units.len();
            span
        })
        .collect()
}

/// Xᵢᵀ V⁻¹ Xᵢ summed, and per-cluster `Xᵢᵀ V⁻¹ vᵢ` for the supplied vector.
pub(crate) fn weighted_cross(
    x: &DMatrix<f64>,
    v: &DVector<f64>,
    spans: &[(usize, usize)],
    working: &WorkingCovariance,
) -> (DMatrix<f64>, DVector<f64>, Vec<DVector<f64>>) {
    let p = x.ncols();
    let mut bread = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut per_cluster = Vec::with_capacity(spans.len());
    for &(s, m) in spans {
        let xi = x.rows(s, m);
        let vi = v.rows(s, m);
        let (a, c) = working.inverse_coefficients(m);
        let colsum: DVector<f64> = xi.row_sum().transpose();
        let vsum = vi.sum();
        bread += (xi.transpose() * xi - &colsum * colsum.transpose() * c) * a;
        let u = (xi.transpose() * vi - &colsum * (c * vsum)) * a;
        rhs += &u;
        per_cluster.push(u);
    }
    (bread, rhs, per_cluster)
}

/// Moment estimates of the working covariance parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub dispersion: f64,
    /// α before clamping into the positive-definite range.
    pub alpha_raw: f64,
    pub alpha: f64,
}

/// φ = Σe²/(M − p).
pub fn moment_dispersion(residuals: &[Vec<f64>], p: usize) -> f64 {
    let total: usize = residuals.iter().map(Vec::len).sum();
    let ss: f64 = residuals.iter().flatten().map(|e| e * e).sum();
    let denom = if total > p { total - p } else { total.max(1) };
    ss / denom as f64
}

/// Method-of-moments dispersion and exchangeable correlation from per-cluster residuals.
pub fn moment_correlation(residuals: &[Vec<f64>], p: usize) -> Result<MomentEstimate> {
    let max_size = residuals.iter().map(Vec::len).max().unwrap_or(0);
    if max_size < 2 {
        return Err(Error::AllSingleton);
    }
    let dispersion = moment_dispersion(residuals, p);
    let mut cross = 0.0;
    let mut pairs = 0usize;
    for r in residuals {
        let s: f64 = r.iter().sum();
        let ss: f64 = r.iter().map(|e| e * e).sum();
        cross += 0.5 * (s * s - ss);
        pairs += r.len() * (r.len() - 1) / 2;
    }
    let denom = if pairs > p { pairs - p } else { pairs };
    let alpha_raw = if dispersion > 0.0 {
        cross / denom as f64 / dispersion
    } else {
        0.0
    };
    let (lo, hi) = WorkingCovariance::alpha_range(max_size);
    let alpha = alpha_raw.clamp(lo + ALPHA_MARGIN, hi - ALPHA_MARGIN);
    if alpha != alpha_raw {
        log::warn!("exchangeable correlation {alpha_raw} clamped to {alpha}");
    }
    Ok(MomentEstimate {
        dispersion,
        alpha_raw,
        alpha,
    })
}

/// Working covariance of the given structure estimated from residuals.
pub fn estimate_working(
    structure: CorrStructure,
    residuals: &[Vec<f64>],
    p: usize,
) -> Result<WorkingCovariance> {
    match structure {
        CorrStructure::Independence => Ok(WorkingCovariance::independence()),
        CorrStructure::Exchangeable => {
            let est = moment_correlation(residuals, p)?;
            if !(est.dispersion > 0.0) {
                return Err(Error::NotPositiveDefinite("zero residual dispersion".into()));
            }
            Ok(WorkingCovariance::exchangeable(est.dispersion, est.alpha))
        }
    }
}

fn gls_solve(blocks: &ClusterBlocks, working: &WorkingCovariance) -> Result<DVector<f64>> {
    let (bread, rhs, _) = weighted_cross(&blocks.x, &blocks.y, &blocks.spans, working);
    match bread.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => bread
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("GEE information matrix".into())),
    }
}

/// Solves Σ Dᵢ Vᵢ⁻¹ (Yᵢ − Xᵢβ) = 0.
pub fn gee_fit(
    data: &TrialDataset,
    spec: &MeanModelSpec,
    working: &WorkingCovariance,
    opts: &GeeOptions,
) -> Result<GeeFit> {
    let blocks = ClusterBlocks::new(data, spec)?;
    let p = blocks.x.ncols();
    let max_size = data.max_cluster_size();
    // The OLS start doubles as the rank check.
    let start = ols_fit(&blocks.x, &blocks.y)?;

    let (beta, working, iterations, converged) = if !opts.estimate_working {
        working.validate(max_size)?;
        let beta = if working.structure == CorrStructure::Independence {
            start.coefficients
        } else {
            gls_solve(&blocks, working)?
        };
        (beta, *working, 1, true)
    } else if working.structure == CorrStructure::Independence {
        (start.coefficients, WorkingCovariance::independence(), 1, true)
    } else {
        let mut beta = start.coefficients;
        let mut current = *working;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < opts.max_iter {
            iterations += 1;
            current = estimate_working(CorrStructure::Exchangeable, &blocks.residuals(&beta), p)?;
            let next = gls_solve(&blocks, &current)?;
            let change = (&next - &beta).amax();
            let scale = next.amax().max(1.0);
            beta = next;
            if change <= opts.tol * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence(opts.max_iter));
        }
        (beta, current, iterations, converged)
    };

    let robust_cov = sandwich_from_blocks(&blocks, &beta, &working)?;
    let (bread, _, _) = weighted_cross(&blocks.x, &blocks.y, &blocks.spans, &working);
    let phi = moment_dispersion(&blocks.residuals(&beta), p);
    // V carries φ already for the exchangeable fit; independence uses φ = 1.
    let naive_scale = match working.structure {
        CorrStructure::Independence => phi,
        CorrStructure::Exchangeable => 1.0,
    };
    let naive_cov = spd_inverse(&bread, "GEE information matrix")? * naive_scale;
    Ok(GeeFit {
        beta,
        robust_cov,
        naive_cov,
        iterations,
        converged,
        working,
        spec: spec.clone(),
    })
}

fn sandwich_from_blocks(
    blocks: &ClusterBlocks,
    beta: &DVector<f64>,
    working: &WorkingCovariance,
) -> Result<DMatrix<f64>> {
    let e = &blocks.y - &blocks.x * beta;
    let (bread, _, scores) = weighted_cross(&blocks.x, &e, &blocks.spans, working);
    let p = bread.nrows();
    let mut meat = DMatrix::zeros(p, p);
    for u in &scores {
        meat += u * u.transpose();
    }
    let inv = spd_inverse(&bread, "sandwich bread")?;
    Ok(symmetrize(&(&inv * meat * &inv)))
}

/// Robust covariance (Σ DᵀV⁻¹D)⁻¹ (Σ [DᵀV⁻¹e]^{⊗2}) (Σ DᵀV⁻¹D)⁻¹.
pub fn sandwich_variance(
    data: &TrialDataset,
    fit: &GeeFit,
    working: &WorkingCovariance,
) -> Result<DMatrix<f64>> {
    let blocks = ClusterBlocks::new(data, &fit.spec)?;
    sandwich_from_blocks(&blocks, &fit.beta, working)
}

/// Wald test of the treatment coefficient with the robust standard error.
pub fn cmm_test(
    data: &TrialDataset,
    spec: &MeanModelSpec,
    working: &WorkingCovariance,
    opts: &GeeOptions,
) -> Result<TestResult> {
    if !spec.include_treatment {
        return Err(Error::InvalidSpec(
            "conditional mean model test needs the treatment term".into(),
        ));
    }
    let fit = gee_fit(data, spec, working, opts)?;
    let idx = 1;
    let var = fit.robust_cov[(idx, idx)];
    wald_test(fit.beta[idx], var.max(0.0).sqrt(), Method::Cmm)
}
