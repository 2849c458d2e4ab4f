//! Generative models for scalar and cluster-randomized trials with lognormal
//! covariates and errors, and a seeded parallel Monte Carlo driver.

use std::fmt::{self, Write as _};
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisConfig, Analyzer};
use crate::data::{ClusterRecord, TrialDataset, Unit};
use crate::error::{Error, Result};
use crate::gee::{moment_correlation, CorrStructure};
use crate::regression::{fit_mean_model, residuals, Method};

/// Scalar sample sizes per arm studied for the independent design.
pub const SCALAR_SIZES: [usize; 5] = [10, 15, 25, 50, 100];

/// (clusters per arm, cluster size) configurations for the clustered design.
pub const CLUSTER_CONFIGS: [(usize, usize); 12] = [
    (10, 20),
    (15, 20),
    (25, 20),
    (10, 30),
    (15, 30),
    (25, 30),
    (25, 4),
    (50, 4),
    (100, 4),
    (25, 6),
    (50, 6),
    (100, 6),
];

/// Additional large-sample clustered configurations with m = 8.
pub const CLUSTER_CONFIGS_M8: [(usize, usize); 3] = [(25, 8), (50, 8), (100, 8)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    IndependentScalar,
    Clustered,
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignKind::IndependentScalar => "independent",
            DesignKind::Clustered => "clustered",
        })
    }
}

impl FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(DesignKind::IndependentScalar),
            "clustered" => Ok(DesignKind::Clustered),
            _ => Err(Error::Config(format!("unknown design kind `{s}`"))),
        }
    }
}

/// Parameters of one generative model.
///
/// Covariates are lognormal with unit log-variance unless stated. For the
/// scalar design, log X₁..X₁₀ share correlation `corr_within`, and each of
/// X₁..X₁₀ has correlation `corr_across` with each of X₁₁..X₂₀. For the
/// clustered design, X₁..X₁₀ are cluster-level with `corr_within` inside the
/// blocks {1..5} and {6..10} and `corr_across` between them. X₁₁..X₂₀ are
/// unit-level with within-cluster correlation `unit_corr`, and the remaining
/// covariates have log-variance `noise_log_var`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub name: String,
    pub kind: DesignKind,
    pub n_per_arm: usize,
    /// Units per cluster; 1 for the scalar design.
    pub cluster_size: usize,
    pub n_covariates: usize,
    pub corr_within: f64,
    pub corr_across: f64,
    pub unit_corr: f64,
    pub noise_log_var: f64,
    /// η₀..η₆: intercept, treatment, then the five outcome covariates.
    pub eta: Vec<f64>,
    /// Variance σ² of log ε.
    pub error_log_var: f64,
    /// log b ~ N(0, ρσ²).
    pub rho: f64,
    pub misspecified: bool,
    /// Coefficients of X₁² and X₁₀² in the misspecified variant.
    pub quadratic: [f64; 2],
    pub seed: u64,
}

pub const DESIGN_NAMES: [&str; 8] = [
    "indep-null",
    "indep-alt",
    "indep-misspec-null",
    "indep-misspec-alt",
    "clustered-null",
    "clustered-alt",
    "clustered-high-null",
    "clustered-high-alt",
];

impl SimulationDesign {
    pub fn independent(alternative: bool) -> Self {
        Self {
            name: if alternative { "indep-alt" } else { "indep-null" }.into(),
            kind: DesignKind::IndependentScalar,
            n_per_arm: 10,
            cluster_size: 1,
            n_covariates: 25,
            corr_within: 0.5,
            corr_across: 0.2,
            unit_corr: 0.0,
            noise_log_var: 1.0,
            eta: vec![1.0, if alternative { 4.0 } else { 0.0 }, 1.0, 1.0, 0.2, 0.2, 0.2],
            error_log_var: 1.1,
            rho: 0.0,
            misspecified: false,
            quadratic: [0.0, 0.0],
            seed: 1,
        }
    }

    pub fn misspecified(alternative: bool) -> Self {
        let mut d = Self::independent(alternative);
        d.name = if alternative { "indep-misspec-alt" } else { "indep-misspec-null" }.into();
        d.misspecified = true;
        d.eta[2] = 0.5;
        d.quadratic = [0.5, 0.2];
        d
    }

    pub fn clustered(alternative: bool, high: bool) -> Self {
        let name = match (high, alternative) {
            (false, false) => "clustered-null",
            (false, true) => "clustered-alt",
            (true, false) => "clustered-high-null",
            (true, true) => "clustered-high-alt",
        };
        Self {
            name: name.into(),
            kind: DesignKind::Clustered,
            n_per_arm: 10,
            cluster_size: 20,
            n_covariates: 25,
            corr_within: 0.5,
            corr_across: 0.2,
            unit_corr: 0.2,
            noise_log_var: 25.0,
            eta: vec![1.0, if alternative { 2.2 } else { 0.0 }, 1.25, 1.25, 0.2, 0.2, 0.2],
            error_log_var: if high { 1.9 } else { 2.8 },
            rho: if high { 1.0 } else { 10.0 / 19.0 },
            misspecified: false,
            quadratic: [0.0, 0.0],
            seed: 1,
        }
    }

    /// Looks up a named design.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "indep-null" => Self::independent(false),
            "indep-alt" => Self::independent(true),
            "indep-misspec-null" => Self::misspecified(false),
            "indep-misspec-alt" => Self::misspecified(true),
            "clustered-null" => Self::clustered(false, false),
            "clustered-alt" => Self::clustered(true, false),
            "clustered-high-null" => Self::clustered(false, true),
            "clustered-high-alt" => Self::clustered(true, true),
            _ => {
                return Err(Error::UnknownDesign {
                    name: name.into(),
                    available: DESIGN_NAMES.join(", "),
                })
            }
        })
    }

    /// Zero-based indices of the covariates in the generating mean.
    pub fn outcome_covariates(&self) -> [usize; 5] {
        match self.kind {
            DesignKind::IndependentScalar => [0, 1, 9, 10, 11],
            DesignKind::Clustered => [0, 10, 2, 11, 14],
        }
    }

    /// The true linear model used as the prespecified correct adjustment.
    pub fn correct_model(&self) -> Vec<usize> {
        self.outcome_covariates().to_vec()
    }

    /// Two predictive and three noise covariates.
    pub fn incorrect_model(&self) -> Vec<usize> {
        match self.kind {
            DesignKind::IndependentScalar => vec![0, 2, 9, 12, 20],
            DesignKind::Clustered => vec![0, 1, 9, 12, 20],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_arm == 0 || self.cluster_size == 0 {
            return Err(Error::Config("n_per_arm and cluster_size must be positive".into()));
        }
        if self.eta.len() != 7 {
            return Err(Error::Config(format!("eta needs 7 entries, got {}", self.eta.len())));
        }
        if self.n_covariates < 20 + usize::from(self.kind == DesignKind::IndependentScalar) {
            return Err(Error::Config(format!("at least 21 covariates are required, got {}", self.n_covariates)));
        }
        if self.kind == DesignKind::IndependentScalar && self.cluster_size != 1 {
            return Err(Error::Config("the independent design has cluster_size 1".into()));
        }
        if !(0.0..1.0).contains(&self.unit_corr) || self.error_log_var < 0.0 || self.rho < 0.0 || self.noise_log_var < 0.0 {
            return Err(Error::Config("variance parameters out of range".into()));
        }
        self.log_covariance().cholesky().ok_or_else(|| {
            Error::NotPositiveDefinite(format!("log-covariate covariance of design `{}`", self.name))
        })?;
        Ok(())
    }

    /// Covariance of the correlated log-covariates: all 25 for the scalar
    /// design, the ten cluster-level ones for the clustered design.
    pub fn log_covariance(&self) -> DMatrix<f64> {
        match self.kind {
            DesignKind::IndependentScalar => {
                let p = self.n_covariates;
                DMatrix::from_fn(p, p, |i, j| {
                    if i == j {
                        1.0
                    } else if i < 10 && j < 10 {
                        self.corr_within
                    } else if (i < 10 && (10..20).contains(&j)) || (j < 10 && (10..20).contains(&i)) {
                        self.corr_across
                    } else {
                        0.0
                    }
                })
            }
            DesignKind::Clustered => DMatrix::from_fn(10, 10, |i, j| {
                if i == j {
                    1.0
                } else if i / 5 == j / 5 {
                    self.corr_within
                } else {
                    self.corr_across
                }
            }),
        }
    }

    fn mean(&self, x: &[f64], a: u8) -> f64 {
        let idx = self.outcome_covariates();
        let mut mu = self.eta[0] + self.eta[1] * a as f64;
        for (k, &j) in idx.iter().enumerate() {
            mu += self.eta[k + 2] * x[j];
        }
        if self.misspecified {
            mu += self.quadratic[0] * x[0] * x[0] + self.quadratic[1] * x[9] * x[9];
        }
        mu
    }

    /// Flat `key = value` rendering, one parameter per line.
    pub fn to_kv(&self) -> String {
        let fmt_list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "kind = {}", self.kind);
        let _ = writeln!(s, "n_per_arm = {}", self.n_per_arm);
        let _ = writeln!(s, "cluster_size = {}", self.cluster_size);
        let _ = writeln!(s, "n_covariates = {}", self.n_covariates);
        let _ = writeln!(s, "corr_within = {}", self.corr_within);
        let _ = writeln!(s, "corr_across = {}", self.corr_across);
        let _ = writeln!(s, "unit_corr = {}", self.unit_corr);
        let _ = writeln!(s, "noise_log_var = {}", self.noise_log_var);
        let _ = writeln!(s, "eta = {}", fmt_list(&self.eta));
        let _ = writeln!(s, "error_log_var = {}", self.error_log_var);
        let _ = writeln!(s, "rho = {}", self.rho);
        let _ = writeln!(s, "misspecified = {}", self.misspecified);
        let _ = writeln!(s, "quadratic = {}", fmt_list(&self.quadratic));
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Parses [`to_kv`](Self::to_kv) output. Unknown keys are errors; `#`
    /// starts a comment and missing keys keep the values of `base`.
    pub fn from_kv(text: &str, base: &SimulationDesign) -> Result<Self> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',').map(|t| num(key, t.trim())).collect()
        }
        let mut d = base.clone();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "name" => d.name = v.to_string(),
                "kind" => d.kind = v.parse()?,
                "n_per_arm" => d.n_per_arm = num(k, v)?,
                "cluster_size" => d.cluster_size = num(k, v)?,
                "n_covariates" => d.n_covariates = num(k, v)?,
                "corr_within" => d.corr_within = num(k, v)?,
                "corr_across" => d.corr_across = num(k, v)?,
                "unit_corr" => d.unit_corr = num(k, v)?,
                "noise_log_var" => d.noise_log_var = num(k, v)?,
                "eta" => d.eta = list(k, v)?,
                "error_log_var" => d.error_log_var = num(k, v)?,
                "rho" => d.rho = num(k, v)?,
                "misspecified" => d.misspecified = num(k, v)?,
                "quadratic" => {
                    let q = list(k, v)?;
                    d.quadratic = q
                        .try_into()
                        .map_err(|_| Error::Config("quadratic needs two values".into()))?;
                }
                "seed" => d.seed = num(k, v)?,
                _ => return Err(Error::Config(format!("unknown design key `{k}`"))),
            }
        }
        d.validate()?;
        Ok(d)
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn lognormal<R: Rng>(rng: &mut R, var: f64) -> f64 {
    (var.sqrt() * normal(rng)).exp()
}

fn correlated_lognormal<R: Rng>(rng: &mut R, chol: &DMatrix<f64>) -> Vec<f64> {
    let z = DVector::from_fn(chol.nrows(), |_, _| normal(rng));
    (chol * z).iter().map(|v| v.exp()).collect()
}

fn shuffled_assignment<R: Rng>(rng: &mut R, n_per_arm: usize) -> Vec<u8> {
    let mut a: Vec<u8> = (0..2 * n_per_arm).map(|i| u8::from(i >= n_per_arm)).collect();
    a.shuffle(rng);
    a
}

fn cholesky_factor(design: &SimulationDesign) -> DMatrix<f64> {
    design
        .log_covariance()
        .cholesky()
        .expect("design covariance is positive definite")
        .l()
}

/// Draws one scalar trial with `n_per_arm` units per arm.
pub fn gen_independent_with<R: Rng>(design: &SimulationDesign, rng: &mut R) -> TrialDataset {
    assert_eq!(design.kind, DesignKind::IndependentScalar);
    let chol = cholesky_factor(design);
    let a = shuffled_assignment(rng, design.n_per_arm);
    let x: Vec<Vec<f64>> = a.iter().map(|_| correlated_lognormal(rng, &chol)).collect();
    let y: Vec<f64> = x
        .iter()
        .zip(&a)
        .map(|(xi, &ai)| design.mean(xi, ai) + lognormal(rng, design.error_log_var))
        .collect();
    TrialDataset::from_scalar(&y, &a, &x).expect("generated scalar data is valid")
}

/// Draws one scalar trial from `design.seed`.
pub fn gen_independent(design: &SimulationDesign) -> TrialDataset {
    gen_independent_with(design, &mut ChaCha8Rng::seed_from_u64(design.seed))
}

/// Draws one cluster-randomized trial with `n_per_arm` clusters per arm.
pub fn gen_clustered_with<R: Rng>(design: &SimulationDesign, rng: &mut R) -> TrialDataset {
    assert_eq!(design.kind, DesignKind::Clustered);
    let chol = cholesky_factor(design);
    let m = design.cluster_size;
    let a = shuffled_assignment(rng, design.n_per_arm);
    let shared_w = design.unit_corr.sqrt();
    let own_w = (1.0 - design.unit_corr).sqrt();
    let clusters = a
        .iter()
        .enumerate()
        .map(|(i, &ai)| {
            let cluster_x = correlated_lognormal(rng, &chol);
            let shared: Vec<f64> = (0..10).map(|_| normal(rng)).collect();
            let b = lognormal(rng, design.rho * design.error_log_var);
            let units = (0..m)
                .map(|_| {
                    let mut x = cluster_x.clone();
                    x.extend(shared.iter().map(|&s| (shared_w * s + own_w * normal(rng)).exp()));
                    x.extend((20..design.n_covariates).map(|_| lognormal(rng, design.noise_log_var)));
                    let outcome = design.mean(&x, ai) + b + lognormal(rng, design.error_log_var);
                    Unit { outcome, covariates: x }
                })
                .collect();
            ClusterRecord {
                id: format!("c{i}"),
                treatment: ai,
                units,
            }
        })
        .collect();
    TrialDataset::from_clusters(clusters).expect("generated clustered data is valid")
}

/// Draws one cluster-randomized trial from `design.seed`.
pub fn gen_clustered(design: &SimulationDesign) -> TrialDataset {
    gen_clustered_with(design, &mut ChaCha8Rng::seed_from_u64(design.seed))
}

/// Draws a trial of whichever kind the design describes.
pub fn generate(design: &SimulationDesign) -> TrialDataset {
    match design.kind {
        DesignKind::IndependentScalar => gen_independent(design),
        DesignKind::Clustered => gen_clustered(design),
    }
}

/// R² of the generating linear model refit by OLS on one draw.
pub fn true_model_r2(design: &SimulationDesign) -> Result<f64> {
    let data = generate(design);
    Ok(fit_mean_model(&data, &design.correct_model(), true)?.r2)
}

/// Moment estimate of the within-cluster correlation of Y given X and A,
/// from residuals of the generating linear model refit by OLS.
pub fn true_model_icc(design: &SimulationDesign) -> Result<f64> {
    let data = generate(design);
    let model = fit_mean_model(&data, &design.correct_model(), true)?;
    let res = residuals(&model, &data)?;
    Ok(moment_correlation(&res, 2 + model.n_covariates())?.alpha_raw)
}

/// Deterministic 64-bit mixing used to derive per-replicate seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `rep` within a study seeded by `seed`.
pub fn replicate_seed(seed: u64, rep: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ rep as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Method,
    pub adjustment: String,
    pub working: CorrStructure,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.method, self.adjustment, self.working)
    }
}

/// What one cell produced on one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellOutcome {
    pub rejected: bool,
    pub n_selected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    #[serde(flatten)]
    pub key: CellKey,
    /// Successful replicates.
    pub reps: usize,
    pub rejections: usize,
    pub rate: f64,
    pub se: f64,
    pub mean_selected: f64,
    pub errors: usize,
    /// Per-replicate rejection, `None` where the cell failed.
    #[serde(skip)]
    pub outcomes: Vec<Option<bool>>,
}

/// Paired contrast of two cells over replicates where both succeeded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedDifference {
    pub diff: f64,
    pub se: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub design: Option<SimulationDesign>,
    pub configs: Vec<AnalysisConfig>,
    pub seed: u64,
    pub reps: usize,
    pub alpha: f64,
    pub cells: Vec<CellSummary>,
}

impl MonteCarloReport {
    pub fn cell(&self, method: Method, adjustment: &str, working: CorrStructure) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.key.method == method && c.key.adjustment == adjustment && c.key.working == working)
    }

    /// Mean of (rejectₐ − reject_b) with its standard error.
    pub fn paired_difference(a: &CellSummary, b: &CellSummary) -> PairedDifference {
        let d: Vec<f64> = a
            .outcomes
            .iter()
            .zip(&b.outcomes)
            .filter_map(|(x, y)| Some(f64::from(u8::from((*x)?)) - f64::from(u8::from((*y)?))))
            .collect();
        let n = d.len();
        if n < 2 {
            return PairedDifference { diff: f64::NAN, se: f64::NAN, n };
        }
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        PairedDifference {
            diff: mean,
            se: (var / n as f64).sqrt(),
            n,
        }
    }

    /// One row per cell, preceded by `#` lines with the version, seed and design.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# covadj {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "# seed = {}", self.seed)?;
        writeln!(w, "# reps = {}", self.reps)?;
        writeln!(w, "# alpha = {}", self.alpha)?;
        if let Some(d) = &self.design {
            for line in d.to_kv().lines() {
                writeln!(w, "# design.{line}")?;
            }
        }
        for (i, c) in self.configs.iter().enumerate() {
            writeln!(w, "# analysis.{i} = {}", serde_json::to_string(c)?)?;
        }
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["method", "adjustment", "working", "reps", "rejections", "rate", "se", "mean_selected", "errors"])?;
        for c in &self.cells {
            csv.write_record([
                c.key.method.to_string(),
                c.key.adjustment.clone(),
                c.key.working.to_string(),
                c.reps.to_string(),
                c.rejections.to_string(),
                format!("{:.6}", c.rate),
                format!("{:.6}", c.se),
                format!("{:.4}", c.mean_selected),
                c.errors.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:<12} {:<6} {:>6} {:>8} {:>8} {:>9} {:>6}",
            "method", "adjustment", "work", "reps", "rate", "se", "selected", "errors"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<16} {:<12} {:<6} {:>6} {:>8.4} {:>8.4} {:>9.2} {:>6}",
                c.key.method.to_string(),
                c.key.adjustment,
                c.key.working.to_string(),
                c.reps,
                c.rate,
                c.se,
                c.mean_selected,
                c.errors
            );
        }
        s
    }
}

pub const MIN_REPS: usize = 100;

/// Runs `replicate(rep, seed)` for every replicate on `workers` threads and
/// aggregates per-cell outcomes in replicate order. `replicate` must return
/// one entry per cell, in the order of `cells`.
pub fn run_replicates<F>(cells: &[CellKey], reps: usize, seed: u64, alpha: f64, workers: usize, replicate: F) -> Result<MonteCarloReport>
where
    F: Fn(usize, u64) -> Vec<std::result::Result<CellOutcome, String>> + Sync,
{
    if reps < MIN_REPS {
        return Err(Error::Config(format!("at least {MIN_REPS} replicates are required, got {reps}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Vec<std::result::Result<CellOutcome, String>>> =
        pool.install(|| (0..reps).into_par_iter().map(|r| replicate(r, replicate_seed(seed, r))).collect());
    let mut summaries = Vec::with_capacity(cells.len());
    for (k, key) in cells.iter().enumerate() {
        let mut outcomes = Vec::with_capacity(reps);
        let mut first_error = None;
        let mut selected = 0.0;
        for row in &results {
            match row.get(k) {
                Some(Ok(o)) => {
                    outcomes.push(Some(o.rejected));
                    selected += o.n_selected;
                }
                Some(Err(e)) => {
                    first_error.get_or_insert_with(|| e.clone());
                    outcomes.push(None);
                }
                None => {
                    first_error.get_or_insert_with(|| "no outcome returned".to_string());
                    outcomes.push(None);
                }
            }
        }
        let ok = outcomes.iter().filter(|o| o.is_some()).count();
        let errors = reps - ok;
        if errors * 100 > reps {
            return Err(Error::CellFailures {
                cell: key.to_string(),
                failures: errors,
                reps,
                first: first_error.unwrap_or_default(),
            });
        }
        if let Some(e) = &first_error {
            log::warn!("cell {key}: {errors} of {reps} replicates failed; first error: {e}");
        }
        let rejections = outcomes.iter().filter(|o| **o == Some(true)).count();
        let rate = rejections as f64 / ok as f64;
        summaries.push(CellSummary {
            key: key.clone(),
            reps: ok,
            rejections,
            rate,
            se: (rate * (1.0 - rate) / ok as f64).sqrt(),
            mean_selected: selected / ok as f64,
            errors,
            outcomes,
        });
    }
    Ok(MonteCarloReport {
        design: None,
        configs: Vec::new(),
        seed,
        reps,
        alpha,
        cells: summaries,
    })
}

fn cells_of(configs: &[AnalysisConfig], clustered: bool) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for c in configs {
        let working = if clustered { c.working } else { CorrStructure::Independence };
        for adj in &c.adjustments {
            for &method in &c.methods {
                cells.push(CellKey {
                    method,
                    adjustment: adj.to_string(),
                    working,
                });
            }
        }
    }
    cells
}

/// Generates `reps` datasets from `design` and runs every cell of every
/// analysis config on each one. Permutation and fold seeds are derived from
/// the replicate seed, so the report depends only on `seed`.
pub fn monte_carlo_study(
    design: &SimulationDesign,
    configs: &[AnalysisConfig],
    reps: usize,
    seed: u64,
    workers: usize,
) -> Result<MonteCarloReport> {
    design.validate()?;
    if configs.is_empty() {
        return Err(Error::Config("no analysis configs given".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let alpha = configs[0].alpha;
    if configs.iter().any(|c| c.alpha != alpha) {
        return Err(Error::Config("all analysis configs must share alpha".into()));
    }
    let clustered = design.kind == DesignKind::Clustered && design.cluster_size > 1;
    let cells = cells_of(configs, clustered);
    let mut report = run_replicates(&cells, reps, seed, alpha, workers, |_, rep_seed| {
        let mut d = design.clone();
        d.seed = rep_seed;
        let data = generate(&d);
        let mut out = Vec::new();
        for c in configs {
            let config = AnalysisConfig {
                seed: splitmix64(rep_seed ^ 0x5EED),
                ..c.clone()
            };
            let mut analyzer = match Analyzer::new(&data, &config) {
                Ok(a) => a,
                Err(e) => {
                    let n = config.adjustments.len() * config.methods.len();
                    out.extend((0..n).map(|_| Err(e.to_string())));
                    continue;
                }
            };
            for adj in &config.adjustments {
                for &method in &config.methods {
                    out.push(
                        analyzer
                            .run(method, adj)
                            .map(|row| CellOutcome {
                                rejected: row.rejected,
                                n_selected: row.n_selected,
                            })
                            .map_err(|e| e.to_string()),
                    );
                }
            }
        }
        out
    })?;
    report.design = Some(design.clone());
    report.configs = configs.to_vec();
    Ok(report)
}
