//! Adaptive covariate selection: greedy forward selection under information
//! criteria, the adaptive LASSO with cross-validated tuning followed by an
//! OLS refit, and precision whitening for clustered data.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SVD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::gee::{cluster_spans, estimate_working, CorrStructure, WorkingCovariance};
use crate::regression::{ols_fit, residuals, FittedMeanModel};

/// Relative norm below which a column counts as spanned by the current design.
const COLLINEAR_TOL: f64 = 1e-10;
/// Initial estimates below this magnitude get an infinite adaptive weight.
const INIT_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Aic,
    BicN,
    BicM,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Aic => "aic",
            Criterion::BicN => "bicn",
            Criterion::BicM => "bicm",
        }
    }

    /// Per-column penalty: 2, log(clusters) or log(rows).
    pub fn penalty(self, rows: usize, groups: usize) -> f64 {
        match self {
            Criterion::Aic => 2.0,
            Criterion::BicN => (groups as f64).ln(),
            Criterion::BicM => (rows as f64).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMethod {
    Forward(Criterion),
    AdaptiveLasso,
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionMethod::Forward(c) => f.write_str(c.name()),
            SelectionMethod::AdaptiveLasso => f.write_str("alasso"),
        }
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aic" => Ok(SelectionMethod::Forward(Criterion::Aic)),
            "bicn" => Ok(SelectionMethod::Forward(Criterion::BicN)),
            "bicm" => Ok(SelectionMethod::Forward(Criterion::BicM)),
            "alasso" => Ok(SelectionMethod::AdaptiveLasso),
            _ => Err(Error::Config(format!("unknown selection method `{s}`"))),
        }
    }
}

/// Number of cross-validation folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Folds {
    Fixed(usize),
    /// One fold per ten clusters, at least two.
    PerTen,
}

impl Folds {
    pub fn resolve(self, groups: usize) -> usize {
        let k = match self {
            Folds::Fixed(k) => k,
            Folds::PerTen => (groups / 10).max(2),
        };
        k.min(groups)
    }
}

impl fmt::Display for Folds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Folds::Fixed(k) => write!(f, "{k}"),
            Folds::PerTen => f.write_str("n/10"),
        }
    }
}

impl FromStr for Folds {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "n/10" {
            return Ok(Folds::PerTen);
        }
        s.parse::<usize>()
            .map(Folds::Fixed)
            .map_err(|_| Error::Config(format!("invalid fold count `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub method: SelectionMethod,
    pub include_treatment: bool,
    pub candidate_indices: Vec<usize>,
    pub cv_folds: Folds,
    pub gamma: f64,
    /// Explicit descending grid; otherwise a log-spaced default of `grid_size` values.
    pub lambda_grid: Option<Vec<f64>>,
    pub grid_size: usize,
    pub seed: u64,
}

impl SelectionSpec {
    pub fn new(method: SelectionMethod, include_treatment: bool, candidate_indices: Vec<usize>) -> Self {
        Self {
            method,
            include_treatment,
            candidate_indices,
            cv_folds: Folds::Fixed(5),
            gamma: 1.0,
            lambda_grid: None,
            grid_size: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == SelectionMethod::AdaptiveLasso {
            if let Folds::Fixed(k) = self.cv_folds {
                if k < 2 {
                    return Err(Error::InvalidSpec("cv_folds must be at least 2".into()));
                }
            }
            if !(self.gamma > 0.0) {
                return Err(Error::InvalidSpec("gamma must be positive".into()));
            }
            if let Some(g) = &self.lambda_grid {
                if g.is_empty() || g.iter().any(|v| !(*v >= 0.0)) || g.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::InvalidSpec("lambda grid must be non-negative and strictly descending".into()));
                }
            } else if self.grid_size == 0 {
                return Err(Error::InvalidSpec("grid size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Working design for selection: forced columns (intercept, optional treatment)
/// plus candidate covariate columns, with the cluster of every row.
#[derive(Debug, Clone)]
pub struct SelectionProblem {
    pub y: DVector<f64>,
    pub forced: DMatrix<f64>,
    pub candidates: DMatrix<f64>,
    /// Covariate index of each candidate column.
    pub ids: Vec<usize>,
    pub groups: Vec<usize>,
    pub n_groups: usize,
}

impl SelectionProblem {
    pub fn new(
        y: DVector<f64>,
        forced: DMatrix<f64>,
        candidates: DMatrix<f64>,
        ids: Vec<usize>,
        groups: Vec<usize>,
    ) -> Result<Self> {
        let n = y.len();
        if forced.nrows() != n || candidates.nrows() != n || groups.len() != n {
            return Err(Error::InvalidSpec("row counts disagree".into()));
        }
        if candidates.ncols() != ids.len() {
            return Err(Error::InvalidSpec("one id per candidate column required".into()));
        }
        if forced.ncols() == 0 || forced.ncols() > 2 {
            return Err(Error::InvalidSpec("forced columns are the intercept and optionally treatment".into()));
        }
        let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
        Ok(Self {
            y,
            forced,
            candidates,
            ids,
            groups,
            n_groups,
        })
    }

    /// Unit-level problem on raw data.
    pub fn from_data(data: &TrialDataset, candidates: &[usize], include_treatment: bool) -> Result<Self> {
        check_candidates(data.n_covariates(), candidates)?;
        let n = data.n_units();
        let f = if include_treatment { 2 } else { 1 };
        let mut forced = DMatrix::zeros(n, f);
        let mut cand = DMatrix::zeros(n, candidates.len());
        let mut y = DVector::zeros(n);
        let mut groups = Vec::with_capacity(n);
        for (row, (g, u)) in data.units().enumerate() {
            forced[(row, 0)] = 1.0;
            if include_treatment {
                forced[(row, 1)] = data.clusters()[g].treatment as f64;
            }
            for (j, &k) in candidates.iter().enumerate() {
                cand[(row, j)] = u.covariates[k];
            }
            y[row] = u.outcome;
            groups.push(g);
        }
        Self::new(y, forced, cand, candidates.to_vec(), groups)
    }

    /// Problem on whitened clusters.
    pub fn from_whitened(w: &WhitenedData, candidates: &[usize], include_treatment: bool) -> Result<Self> {
        let p = w.design.ncols() - 2;
        check_candidates(p, candidates)?;
        let forced = if include_treatment {
            w.design.columns(0, 2).into_owned()
        } else {
            w.design.columns(0, 1).into_owned()
        };
        let cand = DMatrix::from_fn(w.design.nrows(), candidates.len(), |i, j| w.design[(i, 2 + candidates[j])]);
        Self::new(w.y.clone(), forced, cand, candidates.to_vec(), w.groups.clone())
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn include_treatment(&self) -> bool {
        self.forced.ncols() == 2
    }

    fn subset(&self, rows: &[usize]) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        let f = self.forced.select_rows(rows);
        let c = self.candidates.select_rows(rows);
        (y, f, c)
    }

    /// OLS refit on the forced columns plus candidate positions `cols`.
    pub fn refit(&self, cols: &[usize]) -> Result<FittedMeanModel> {
        let x = stack(&self.forced, &self.candidates, cols);
        let fit = ols_fit(&x, &self.y)?;
        let ids = cols.iter().map(|&c| self.ids[c]).collect();
        Ok(FittedMeanModel::from_coefficients(
            ids,
            self.include_treatment(),
            &fit.coefficients,
            fit.rss,
            self.rows(),
            fit.r2,
        ))
    }
}

fn check_candidates(p: usize, candidates: &[usize]) -> Result<()> {
    if let Some(&index) = candidates.iter().find(|&&k| k >= p) {
        return Err(Error::CovariateIndex { index, available: p });
    }
    Ok(())
}

fn stack(forced: &DMatrix<f64>, cand: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    let f = forced.ncols();
    DMatrix::from_fn(forced.nrows(), f + cols.len(), |i, j| {
        if j < f {
            forced[(i, j)]
        } else {
            cand[(i, cols[j - f])]
        }
    })
}

/// Orthonormal basis for the column space, dropping directions below the rank tolerance.
fn orthonormal_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
    if x.ncols() == 0 {
        return DMatrix::zeros(x.nrows(), 0);
    }
    let svd = SVD::new(x.clone(), true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > COLLINEAR_TOL * smax)
        .collect();
    u.select_columns(&keep)
}

/// Accepted steps of forward selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPath {
    /// Candidate positions in entry order.
    pub selected: Vec<usize>,
    /// Criterion of the starting model followed by one value per accepted step.
    pub criteria: Vec<f64>,
    /// Candidates skipped because they were spanned by the design at some step.
    pub skipped: Vec<usize>,
}

/// Greedy forward selection starting from the forced columns.
pub fn forward_path(problem: &SelectionProblem, criterion: Criterion) -> Result<ForwardPath> {
    let n = problem.rows();
    let f = problem.forced.ncols();
    if n <= f {
        return Err(Error::TooFewRows { rows: n, cols: f });
    }
    let pen = criterion.penalty(n, problem.n_groups);
    let score = |rss: f64, cols: usize| n as f64 * (rss / n as f64).ln() + pen * cols as f64;

    let mut q = orthonormal_basis(&problem.forced);
    let mut r = &problem.y - &q * (q.transpose() * &problem.y);
    let mut rss = r.norm_squared();
    let exact = 1e-20 * problem.y.norm_squared().max(f64::MIN_POSITIVE);
    let mut current = score(rss, f);
    let mut path = ForwardPath {
        selected: Vec::new(),
        criteria: vec![current],
        skipped: Vec::new(),
    };
    let mut available: Vec<usize> = (0..problem.candidates.ncols()).collect();

    while !available.is_empty() && n > f + path.selected.len() + 1 && rss > exact {
        let mut best: Option<(usize, f64, DVector<f64>)> = None;
        let mut spanned = Vec::new();
        for &c in &available {
            let x = problem.candidates.column(c);
            let mut rc = x - &q * (q.transpose() * x);
            // Second pass keeps the basis orthogonal on nearly collinear columns.
            rc -= &q * (q.transpose() * &rc);
            let norm = rc.norm();
            if norm <= COLLINEAR_TOL * x.norm() || norm == 0.0 {
                spanned.push(c);
                continue;
            }
            let unit = rc / norm;
            let gain = unit.dot(&r).powi(2);
            let new_rss = (rss - gain).max(0.0);
            if best.as_ref().is_none_or(|b| new_rss < b.1) {
                best = Some((c, new_rss, unit));
            }
        }
        for c in spanned {
            log::warn!("candidate column {} is collinear with the current design; skipped", problem.ids[c]);
            available.retain(|&a| a != c);
            path.skipped.push(c);
        }
        let Some((c, new_rss, unit)) = best else { break };
        let cand = score(new_rss, f + path.selected.len() + 1);
        if !(cand < current) {
            break;
        }
        r -= &unit * unit.dot(&r);
        rss = r.norm_squared().min(new_rss.max(0.0)).max(0.0);
        let last = q.ncols();
        q = q.insert_column(last, 0.0);
        q.set_column(last, &unit);
        current = cand;
        path.criteria.push(current);
        path.selected.push(c);
        available.retain(|&a| a != c);
    }
    Ok(path)
}

/// Coordinate descent for `(1/2)‖y − Xβ‖² + λ Σ wₖ|βₖ|`; zero weights leave a column unpenalized.
pub fn coordinate_descent(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &[f64],
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
    start: Option<&DVector<f64>>,
) -> DVector<f64> {
    let p = x.ncols();
    let mut beta = start.cloned().unwrap_or_else(|| DVector::zeros(p));
    let mut r = y - x * &beta;
    let norms: Vec<f64> = (0..p).map(|k| x.column(k).norm_squared()).collect();
    for _ in 0..max_sweeps {
        let mut max_change = 0.0f64;
        for k in 0..p {
            if norms[k] == 0.0 {
                continue;
            }
            let col = x.column(k);
            let old = beta[k];
            let rho = col.dot(&r) + norms[k] * old;
            let thresh = lambda * weights[k];
            let new = if rho > thresh {
                (rho - thresh) / norms[k]
            } else if rho < -thresh {
                (rho + thresh) / norms[k]
            } else {
                0.0
            };
            if new != old {
                r.axpy(old - new, &col, 1.0);
                beta[k] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        if max_change < tol {
            break;
        }
    }
    beta
}

pub const CD_TOL: f64 = 1e-8;
const CD_MAX_SWEEPS: usize = 100_000;

/// Penalized design after projecting out forced columns and standardizing.
struct LassoDesign {
    z: DMatrix<f64>,
    y: DVector<f64>,
    /// Candidate position of each retained column.
    cols: Vec<usize>,
    scale: Vec<f64>,
    weights: Vec<f64>,
}

impl LassoDesign {
    fn build(y: &DVector<f64>, forced: &DMatrix<f64>, cand: &DMatrix<f64>, gamma: f64) -> Self {
        let q = orthonormal_basis(forced);
        let yt = y - &q * (q.transpose() * y);
        let n = y.len();
        let mut cols = Vec::new();
        let mut scale = Vec::new();
        let mut zcols = Vec::new();
        for c in 0..cand.ncols() {
            let x = cand.column(c);
            let zc = x - &q * (q.transpose() * x);
            let norm = zc.norm();
            if norm <= COLLINEAR_TOL * x.norm() || norm == 0.0 {
                continue;
            }
            let sd = (zc.norm_squared() / (n.max(2) - 1) as f64).sqrt();
            zcols.push(zc / sd);
            cols.push(c);
            scale.push(sd);
        }
        let z = if zcols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&zcols)
        };
        // Minimum-norm least squares; equals OLS whenever that is identified.
        let init = if z.ncols() == 0 {
            DVector::zeros(0)
        } else {
            let svd = SVD::new(z.clone(), true, true);
            let eps = COLLINEAR_TOL * svd.singular_values.max();
            svd.solve(&yt, eps).unwrap_or_else(|_| DVector::zeros(z.ncols()))
        };
        let mut keep = Vec::new();
        let mut weights = Vec::new();
        for (j, &b) in init.iter().enumerate() {
            if b.abs() < INIT_ZERO {
                log::debug!("candidate position {} has a zero initial estimate; excluded", cols[j]);
                continue;
            }
            keep.push(j);
            weights.push(1.0 / b.abs().powf(gamma));
        }
        let z = z.select_columns(&keep);
        let cols = keep.iter().map(|&j| cols[j]).collect();
        let scale = keep.iter().map(|&j| scale[j]).collect();
        Self { z, y: yt, cols, scale, weights }
    }

    /// Smallest λ at which every penalized coefficient is zero.
    fn lambda_max(&self) -> f64 {
        (0..self.z.ncols())
            .map(|k| self.z.column(k).dot(&self.y).abs() / self.weights[k])
            .fold(0.0, f64::max)
    }

    /// Standardized coefficients along a descending grid, with warm starts.
    fn path(&self, grid: &[f64]) -> Vec<DVector<f64>> {
        let mut beta = DVector::zeros(self.z.ncols());
        grid.iter()
            .map(|&lam| {
                if self.z.ncols() > 0 {
                    beta = coordinate_descent(&self.z, &self.y, &self.weights, lam, CD_TOL, CD_MAX_SWEEPS, Some(&beta));
                }
                beta.clone()
            })
            .collect()
    }

    fn support(&self, beta: &DVector<f64>) -> Vec<usize> {
        (0..beta.len()).filter(|&k| beta[k] != 0.0).map(|k| self.cols[k]).collect()
    }

    /// Supports (candidate positions) along a descending grid.
    fn supports(&self, grid: &[f64]) -> Vec<Vec<usize>> {
        self.path(grid).iter().map(|b| self.support(b)).collect()
    }

    /// Raw-scale candidate coefficients of a standardized solution.
    fn raw_coefficients(&self, beta: &DVector<f64>, n_candidates: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n_candidates);
        for (k, &c) in self.cols.iter().enumerate() {
            out[c] = beta[k] / self.scale[k];
        }
        out
    }
}

fn default_grid(lambda_max: f64, size: usize) -> Vec<f64> {
    if size == 1 {
        return vec![lambda_max];
    }
    (0..size)
        .map(|i| lambda_max * 10f64.powf(-4.0 * i as f64 / (size - 1) as f64))
        .collect()
}

fn resolve_grid(problem: &SelectionProblem, spec: &SelectionSpec) -> (LassoDesign, Vec<f64>) {
    let design = LassoDesign::build(&problem.y, &problem.forced, &problem.candidates, spec.gamma);
    let grid = match &spec.lambda_grid {
        Some(g) => g.clone(),
        None => default_grid(design.lambda_max(), spec.grid_size),
    };
    (design, grid)
}

/// Adaptive LASSO at a fixed λ, followed by an OLS refit of the support.
pub fn adaptive_lasso_fit(problem: &SelectionProblem, gamma: f64, lambda: f64) -> Result<FittedMeanModel> {
    let design = LassoDesign::build(&problem.y, &problem.forced, &problem.candidates, gamma);
    let support = design.supports(&[lambda]).pop().unwrap_or_default();
    problem.refit(&support)
}

/// Cluster-respecting fold label for every group.
fn fold_labels(n_groups: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_groups).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut label = vec![0; n_groups];
    for (pos, &g) in order.iter().enumerate() {
        label[g] = pos % folds;
    }
    label
}

/// Held-out squared error of the penalized fit, forced coefficients re-solved on training rows.
fn penalized_error(
    design: &LassoDesign,
    beta: &DVector<f64>,
    train: (&DVector<f64>, &DMatrix<f64>, &DMatrix<f64>),
    test: (&DVector<f64>, &DMatrix<f64>, &DMatrix<f64>),
) -> f64 {
    let b = design.raw_coefficients(beta, train.2.ncols());
    let partial = train.0 - train.2 * &b;
    let svd = SVD::new(train.1.clone(), true, true);
    let eps = COLLINEAR_TOL * svd.singular_values.max();
    let Ok(g) = svd.solve(&partial, eps) else {
        return f64::INFINITY;
    };
    (test.0 - test.1 * g - test.2 * b).norm_squared()
}

/// λ on the grid minimizing cross-validated prediction error, ties to the larger λ.
pub fn cross_validate_lambda(problem: &SelectionProblem, spec: &SelectionSpec) -> Result<f64> {
    spec.validate()?;
    let (_, grid) = resolve_grid(problem, spec);
    cross_validate_on(problem, spec, &grid)
}

fn cross_validate_on(problem: &SelectionProblem, spec: &SelectionSpec, grid: &[f64]) -> Result<f64> {
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let folds = spec.cv_folds.resolve(problem.n_groups);
    if folds < 2 {
        return Err(Error::InvalidSpec(format!(
            "cross-validation needs at least two clusters, found {}",
            problem.n_groups
        )));
    }
    let labels = fold_labels(problem.n_groups, folds, spec.seed);
    let f = problem.forced.ncols();
    let fold_rows: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|k| (0..problem.rows()).partition(|&r| labels[problem.groups[r]] != k))
        .collect();
    for (k, (train, _)) in fold_rows.iter().enumerate() {
        if train.len() <= f {
            return Err(Error::FoldTooSmall { fold: k, rows: train.len(), cols: f });
        }
    }
    let errors: Vec<Vec<f64>> = fold_rows
        .par_iter()
        .map(|(train, test)| {
            let tr = problem.subset(train);
            let te = problem.subset(test);
            let design = LassoDesign::build(&tr.0, &tr.1, &tr.2, spec.gamma);
            design
                .path(grid)
                .iter()
                .map(|b| penalized_error(&design, b, (&tr.0, &tr.1, &tr.2), (&te.0, &te.1, &te.2)))
                .collect()
        })
        .collect();
    let n = problem.rows() as f64;
    let mut best = grid[0];
    let mut best_err = f64::INFINITY;
    for (i, &lam) in grid.iter().enumerate() {
        let err: f64 = errors.iter().map(|e| e[i]).sum::<f64>() / n;
        if err < best_err && (best_err.is_infinite() || err < best_err * (1.0 - 1e-12)) {
            best_err = err;
            best = lam;
        }
    }
    Ok(best)
}

/// Adaptive LASSO with cross-validated λ, refit by OLS.
pub fn adaptive_lasso_select(problem: &SelectionProblem, spec: &SelectionSpec) -> Result<(FittedMeanModel, f64)> {
    spec.validate()?;
    let (design, grid) = resolve_grid(problem, spec);
    if design.z.ncols() == 0 {
        return Ok((problem.refit(&[])?, grid.first().copied().unwrap_or(0.0)));
    }
    let lambda = cross_validate_on(problem, spec, &grid)?;
    let upto: Vec<f64> = grid.iter().copied().take_while(|&g| g >= lambda).collect();
    // Near saturation the chosen support may not be refittable; step back
    // along the path to the nearest λ whose support is.
    let f = problem.forced.ncols();
    for support in design.supports(&upto).into_iter().rev() {
        if support.len() + f >= problem.rows() {
            continue;
        }
        match problem.refit(&support) {
            Ok(model) => return Ok((model, lambda)),
            Err(Error::RankDeficient(_)) | Err(Error::TooFewRows { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok((problem.refit(&[])?, lambda))
}

/// Runs the configured selection method on a prepared problem.
pub fn select_on_problem(problem: &SelectionProblem, spec: &SelectionSpec) -> Result<FittedMeanModel> {
    let model = match spec.method {
        SelectionMethod::Forward(c) => {
            let path = forward_path(problem, c)?;
            problem.refit(&path.selected)?
        }
        SelectionMethod::AdaptiveLasso => adaptive_lasso_select(problem, spec)?.0,
    };
    assert_eq!(model.includes_treatment(), spec.include_treatment);
    Ok(model)
}

/// Forward selection on unit-level data.
pub fn forward_select(data: &TrialDataset, spec: &SelectionSpec) -> Result<FittedMeanModel> {
    let SelectionMethod::Forward(_) = spec.method else {
        return Err(Error::InvalidSpec("forward_select needs a forward criterion".into()));
    };
    select_on_problem(&SelectionProblem::from_data(data, &spec.candidate_indices, spec.include_treatment)?, spec)
}

/// Whitened outcomes and design `Λᵢ^{1/2}[Yᵢ | 1, A, X]` stacked over clusters.
#[derive(Debug, Clone)]
pub struct WhitenedData {
    pub y: DVector<f64>,
    /// Columns: intercept, treatment, then every covariate.
    pub design: DMatrix<f64>,
    pub groups: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    pub provenance: String,
}

pub fn whiten_clusters(data: &TrialDataset, working: &WorkingCovariance) -> Result<WhitenedData> {
    working.validate(data.max_cluster_size())?;
    let p = data.n_covariates();
    let n = data.n_units();
    let mut y = DVector::zeros(n);
    let mut design = DMatrix::zeros(n, p + 2);
    let mut groups = Vec::with_capacity(n);
    let spans = cluster_spans(data);
    for (g, (c, &(start, m))) in data.clusters().iter().zip(&spans).enumerate() {
        let root = working.inverse_sqrt(m);
        let yi = DVector::from_iterator(m, c.units.iter().map(|u| u.outcome));
        let xi = DMatrix::from_fn(m, p + 2, |j, k| match k {
            0 => 1.0,
            1 => c.treatment as f64,
            _ => c.units[j].covariates[k - 2],
        });
        y.rows_mut(start, m).copy_from(&(&root * yi));
        design.rows_mut(start, m).copy_from(&(&root * xi));
        groups.extend(std::iter::repeat_n(g, m));
    }
    Ok(WhitenedData {
        y,
        design,
        groups,
        spans,
        provenance: format!(
            "{} working covariance, dispersion {}, correlation {}",
            working.structure, working.dispersion, working.exch_alpha
        ),
    })
}

/// Selection under independence, then, for exchangeable working correlation on
/// clustered data, a second pass on data whitened with the correlation estimated
/// from the first model's residuals.
pub fn select_model(data: &TrialDataset, spec: &SelectionSpec, working: CorrStructure) -> Result<FittedMeanModel> {
    spec.validate()?;
    let problem = SelectionProblem::from_data(data, &spec.candidate_indices, spec.include_treatment)?;
    let model = select_on_problem(&problem, spec)?;
    if working == CorrStructure::Independence || data.is_singleton() {
        return Ok(model);
    }
    let res = residuals(&model, data)?;
    let p = 1 + spec.include_treatment as usize + model.n_covariates();
    let v = estimate_working(CorrStructure::Exchangeable, &res, p)?;
    let whitened = whiten_clusters(data, &v)?;
    let problem = SelectionProblem::from_whitened(&whitened, &spec.candidate_indices, spec.include_treatment)?;
    select_on_problem(&problem, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClusterRecord, Unit};
    use crate::regression::fit_mean_model;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise_data(seed: u64, n: usize, p: usize) -> TrialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        TrialDataset::from_scalar(&y, &a, &x).unwrap()
    }

    fn orthonormal(seed: u64, n: usize, p: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        g.qr().q()
    }

    #[test]
    fn exact_predictor_selected_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<f64> = x.iter().map(|v| 5.0 * v[2]).collect();
        let a: Vec<u8> = (0..30).map(|i| (i % 2) as u8).collect();
        let d = TrialDataset::from_scalar(&y, &a, &x).unwrap();
        for c in [Criterion::Aic, Criterion::BicN, Criterion::BicM] {
            let problem = SelectionProblem::from_data(&d, &[0, 1, 2, 3, 4], false).unwrap();
            let path = forward_path(&problem, c).unwrap();
            assert_eq!(path.selected, vec![2]);
            let m = problem.refit(&path.selected).unwrap();
            assert!(m.rss < 1e-20);
            assert_eq!(m.selected, vec![2]);
        }
    }

    #[test]
    fn criterion_non_increasing_and_refit_matches_ols() {
        let d = noise_data(2, 60, 8);
        let problem = SelectionProblem::from_data(&d, &(0..8).collect::<Vec<_>>(), true).unwrap();
        let path = forward_path(&problem, Criterion::Aic).unwrap();
        assert!(path.criteria.windows(2).all(|w| w[1] < w[0]));
        let spec = SelectionSpec::new(SelectionMethod::Forward(Criterion::Aic), true, (0..8).collect());
        let m = forward_select(&d, &spec).unwrap();
        let ids: Vec<usize> = path.selected.iter().map(|&c| problem.ids[c]).collect();
        assert_eq!(m.selected, ids);
        let direct = fit_mean_model(&d, &ids, true).unwrap();
        for (a, b) in m.eta.iter().zip(&direct.eta) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((m.treatment_coef.unwrap() - direct.treatment_coef.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn greedy_gain_matches_brute_force_rss() {
        let d = noise_data(3, 25, 6);
        let problem = SelectionProblem::from_data(&d, &(0..6).collect::<Vec<_>>(), false).unwrap();
        let path = forward_path(&problem, Criterion::Aic).unwrap();
        if let Some(&first) = path.selected.first() {
            let best = (0..6)
                .min_by(|&a, &b| {
                    let ra = fit_mean_model(&d, &[a], false).unwrap().rss;
                    let rb = fit_mean_model(&d, &[b], false).unwrap().rss;
                    ra.partial_cmp(&rb).unwrap()
                })
                .unwrap();
            assert_eq!(first, best);
        }
    }

    #[test]
    fn collinear_candidate_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let a: f64 = rng.random();
                vec![a, 2.0 * a, rng.random()]
            })
            .collect();
        let y: Vec<f64> = x.iter().map(|v| v[0] * 3.0 + v[2] + 0.01 * rng.random::<f64>()).collect();
        let a: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let d = TrialDataset::from_scalar(&y, &a, &x).unwrap();
        let problem = SelectionProblem::from_data(&d, &[0, 1, 2], false).unwrap();
        let path = forward_path(&problem, Criterion::Aic).unwrap();
        assert_eq!(path.selected.len(), 2);
        assert_eq!(path.skipped.len(), 1);
        assert!(problem.refit(&path.selected).is_ok());
    }

    #[test]
    fn bic_empty_on_noise_mostly() {
        let mut small = 0;
        for seed in 0..200 {
            let d = noise_data(1000 + seed, 500, 5);
            let spec = SelectionSpec::new(SelectionMethod::Forward(Criterion::BicM), false, (0..5).collect());
            if forward_select(&d, &spec).unwrap().n_covariates() <= 2 {
                small += 1;
            }
        }
        assert!(small >= 180, "{small}");
    }

    #[test]
    fn soft_threshold_on_orthonormal_design() {
        let x = orthonormal(5, 20, 6);
        let y: DVector<f64> = DVector::from_fn(20, |i, _| (i as f64 * 0.7).sin() * 3.0);
        let b = x.transpose() * &y;
        let w = [1.0, 0.5, 2.0, 1.5, 0.0, 0.8];
        let lam = 0.6;
        let beta = coordinate_descent(&x, &y, &w, lam, 1e-12, 1000, None);
        for k in 0..6 {
            let expect = b[k].signum() * (b[k].abs() - lam * w[k]).max(0.0);
            assert!((beta[k] - expect).abs() < 1e-10);
        }
        let lmax = (0..6).filter(|&k| w[k] > 0.0).map(|k| b[k].abs() / w[k]).fold(0.0, f64::max);
        let all = coordinate_descent(&x, &y, &w, lmax * 1.0001, 1e-12, 1000, None);
        for k in 0..6 {
            if w[k] > 0.0 {
                assert_eq!(all[k], 0.0);
            } else {
                assert!((all[k] - b[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_lambda_gives_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DMatrix::from_fn(30, 4, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(30, |_, _| rng.random::<f64>());
        let beta = coordinate_descent(&x, &y, &[1.0; 4], 0.0, 1e-13, 1_000_000, None);
        let ols = ols_fit(&x, &y).unwrap();
        assert!((beta - ols.coefficients).amax() < 1e-8);
    }

    #[test]
    fn single_grid_value_and_perfect_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 4.0 * v[0]).collect();
        let a: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let d = TrialDataset::from_scalar(&y, &a, &x).unwrap();
        let problem = SelectionProblem::from_data(&d, &[0, 1, 2, 3], false).unwrap();
        let mut spec = SelectionSpec::new(SelectionMethod::AdaptiveLasso, false, vec![0, 1, 2, 3]);
        spec.lambda_grid = Some(vec![0.37]);
        assert_eq!(cross_validate_lambda(&problem, &spec).unwrap(), 0.37);
        spec.lambda_grid = None;
        let (m, _) = adaptive_lasso_select(&problem, &spec).unwrap();
        assert!(m.selected.contains(&0));
        assert!(m.rss < 1e-16);
    }

    #[test]
    fn lasso_mostly_empty_on_noise() {
        let mut empty = 0;
        for seed in 0..200 {
            let d = noise_data(5000 + seed, 60, 5);
            let mut spec = SelectionSpec::new(SelectionMethod::AdaptiveLasso, false, (0..5).collect());
            spec.seed = seed;
            spec.grid_size = 30;
            let problem = SelectionProblem::from_data(&d, &spec.candidate_indices, false).unwrap();
            if adaptive_lasso_select(&problem, &spec).unwrap().0.n_covariates() == 0 {
                empty += 1;
            }
        }
        assert!(empty >= 140, "{empty}");
    }

    #[test]
    fn lasso_respects_forced_treatment() {
        let d = noise_data(8, 40, 6);
        let mut spec = SelectionSpec::new(SelectionMethod::AdaptiveLasso, true, (0..6).collect());
        spec.grid_size = 20;
        let m = select_model(&d, &spec, CorrStructure::Independence).unwrap();
        assert!(m.includes_treatment());
        spec.include_treatment = false;
        let m = select_model(&d, &spec, CorrStructure::Independence).unwrap();
        assert!(!m.includes_treatment());
    }

    #[test]
    fn folds_partition_clusters() {
        let labels = fold_labels(23, 5, 9);
        let mut counts = [0; 5];
        for &l in &labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4 || c == 5));
        assert_eq!(fold_labels(23, 5, 9), labels);
        assert_eq!(Folds::PerTen.resolve(20), 2);
        assert_eq!(Folds::PerTen.resolve(200), 20);
        assert_eq!(Folds::Fixed(5).resolve(3), 3);
    }

    #[test]
    fn spec_validation() {
        let mut s = SelectionSpec::new(SelectionMethod::AdaptiveLasso, false, vec![0]);
        s.cv_folds = Folds::Fixed(1);
        assert!(s.validate().is_err());
        s.cv_folds = Folds::Fixed(5);
        s.lambda_grid = Some(vec![1.0, 2.0]);
        assert!(s.validate().is_err());
        s.lambda_grid = Some(vec![2.0, 1.0]);
        assert!(s.validate().is_ok());
    }

    fn clustered(seed: u64) -> TrialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = (0..10)
            .map(|i| ClusterRecord {
                id: i.to_string(),
                treatment: (i % 2) as u8,
                units: (0..(2 + i % 3))
                    .map(|_| {
                        let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                        Unit { outcome: x[0] + rng.random::<f64>(), covariates: x }
                    })
                    .collect(),
            })
            .collect();
        TrialDataset::from_clusters(clusters).unwrap()
    }

    #[test]
    fn whitening_identity_and_square_root() {
        let d = clustered(10);
        let w = whiten_clusters(&d, &WorkingCovariance::independence()).unwrap();
        let (x, y) = crate::regression::design_matrix(&d, &[0, 1, 2], true).unwrap();
        assert!((&w.design - &x).amax() < 1e-15);
        assert!((&w.y - &y).amax() < 1e-15);

        let ex = WorkingCovariance::exchangeable(1.0, 0.5);
        let root = ex.inverse_sqrt(2);
        let analytic = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]) / 0.75;
        assert!((&root * &root - analytic).amax() < 1e-12);
        let eig = root.symmetric_eigenvalues();
        assert!(eig.min() > 0.0);

        let zero = whiten_clusters(&d, &WorkingCovariance::exchangeable(1.0, 0.0)).unwrap();
        let p1 = SelectionProblem::from_whitened(&zero, &[0, 1], true).unwrap().refit(&[0, 1]).unwrap();
        let p2 = fit_mean_model(&d, &[0, 1], true).unwrap();
        for (a, b) in p1.eta.iter().zip(&p2.eta) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn whitening_keeps_exact_fit_exact() {
        let clusters = (0..6)
            .map(|i| ClusterRecord {
                id: i.to_string(),
                treatment: (i % 2) as u8,
                units: (0..3)
                    .map(|j| {
                        let x = (i * 3 + j) as f64 * 0.3;
                        Unit { outcome: 1.0 - 2.0 * x + 0.5 * (i % 2) as f64, covariates: vec![x] }
                    })
                    .collect(),
            })
            .collect();
        let d = TrialDataset::from_clusters(clusters).unwrap();
        let w = whiten_clusters(&d, &WorkingCovariance::exchangeable(2.0, 0.3)).unwrap();
        let m = SelectionProblem::from_whitened(&w, &[0], true).unwrap().refit(&[0]).unwrap();
        assert!(m.rss < 1e-20);
        assert!((m.eta[1] + 2.0).abs() < 1e-10);
    }

    #[test]
    fn exchangeable_selection_runs_on_clusters() {
        let d = clustered(11);
        let spec = SelectionSpec::new(SelectionMethod::Forward(Criterion::BicN), false, vec![0, 1, 2]);
        let m = select_model(&d, &spec, CorrStructure::Exchangeable).unwrap();
        assert!(!m.includes_treatment());
    }

    proptest! {
        #[test]
        fn support_shrinks_with_lambda_on_orthonormal(seed in 0u64..500) {
            let x = orthonormal(seed, 15, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let y = DVector::from_fn(15, |_, _| StandardNormal.sample(&mut rng));
            let w: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.1).collect();
            let mut last = usize::MAX;
            for lam in [0.0, 0.1, 0.3, 0.6, 1.0, 2.0, 5.0] {
                let b = coordinate_descent(&x, &y, &w, lam, 1e-12, 1000, None);
                let nz = b.iter().filter(|v| **v != 0.0).count();
                prop_assert!(nz <= last);
                last = nz;
            }
        }
    }
}
