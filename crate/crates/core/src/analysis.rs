//! End-to-end analysis of one dataset: every requested (method, adjustment)
//! pair is run on the same data, with selected models cached so that methods
//! sharing a working model also share its selection.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{augmented_test, AugmentOptions};
use crate::data::{center_outcomes, cluster_average, TrialDataset};
use crate::error::{Error, Result};
use crate::gee::{cmm_test, estimate_working, CorrStructure, GeeOptions, MeanModelSpec, WorkingCovariance};
use crate::randomize::{
    approx_exact_test, build_scores, exact_permutation_test, PermutationPlan, Reference, ScoreSet,
    DEFAULT_EXHAUSTIVE_CAP,
};
use crate::regression::{fit_mean_model, residuals, FittedMeanModel, Method, TestResult};
use crate::select::{select_model, Folds, SelectionMethod, SelectionSpec};

/// How the working mean model is chosen.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adjustment {
    None,
    Select(SelectionMethod),
    Fixed(Vec<usize>),
}

impl fmt::Display for Adjustment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Adjustment::None => f.write_str("none"),
            Adjustment::Select(m) => write!(f, "{m}"),
            Adjustment::Fixed(cols) => {
                let list: Vec<String> = cols.iter().map(|c| c.to_string()).collect();
                write!(f, "fixed:{}", list.join(","))
            }
        }
    }
}

impl FromStr for Adjustment {
    type Err = Error;

    /// `fixed:` lists zero-based covariate indices.
    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Adjustment::None);
        }
        if let Some(rest) = s.strip_prefix("fixed:") {
            let cols = rest
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("invalid covariate index `{t}` in `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(Adjustment::Fixed(cols));
        }
        s.parse::<SelectionMethod>().map(Adjustment::Select)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub methods: Vec<Method>,
    pub adjustments: Vec<Adjustment>,
    pub working: CorrStructure,
    /// Collapse clusters to their means and use the scalar methods.
    pub cluster_average: bool,
    /// Mean-center outcomes for unadjusted randomization scores.
    pub center: bool,
    pub permutations: usize,
    pub exhaustive: bool,
    pub exhaustive_cap: u128,
    pub seed: u64,
    pub alpha: f64,
    pub folds: Folds,
    pub gamma: f64,
    pub grid_size: usize,
    /// Re-select on whitened data when the working correlation is exchangeable.
    pub whiten: bool,
    /// Apply the correction factor to the clustered augmented variance.
    pub correct_clustered: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            adjustments: vec![Adjustment::None],
            working: CorrStructure::Independence,
            cluster_average: false,
            center: false,
            permutations: 1000,
            exhaustive: false,
            exhaustive_cap: DEFAULT_EXHAUSTIVE_CAP,
            seed: 1,
            alpha: 0.05,
            folds: Folds::Fixed(5),
            gamma: 1.0,
            grid_size: 100,
            whiten: false,
            correct_clustered: true,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !self.exhaustive && self.permutations == 0 {
            return Err(Error::NoPermutations);
        }
        if self.methods.is_empty() || self.adjustments.is_empty() {
            return Err(Error::Config("at least one method and one adjustment are required".into()));
        }
        Ok(())
    }

    fn plan(&self) -> PermutationPlan {
        if self.exhaustive {
            PermutationPlan::Exhaustive {
                cap: self.exhaustive_cap,
            }
        } else {
            PermutationPlan::monte_carlo(self.permutations, self.seed)
        }
    }
}

/// One row of output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub method: Method,
    pub adjustment: String,
    pub working: CorrStructure,
    pub result: TestResult,
    /// Covariates in the working model; the mean over arms for the augmented test.
    pub n_selected: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Purpose {
    WithTreatment,
    WithoutTreatment,
    Arm(u8),
}

/// Per-dataset analysis state.
pub struct Analyzer<'a> {
    data: TrialDataset,
    config: &'a AnalysisConfig,
    models: HashMap<(Adjustment, Purpose), FittedMeanModel>,
    scores: HashMap<Adjustment, (ScoreSet, f64)>,
}

impl<'a> Analyzer<'a> {
    pub fn new(data: &TrialDataset, config: &'a AnalysisConfig) -> Result<Self> {
        config.validate()?;
        let data = if config.cluster_average && !data.is_singleton() {
            cluster_average(data)
        } else {
            data.clone()
        };
        Ok(Self {
            data,
            config,
            models: HashMap::new(),
            scores: HashMap::new(),
        })
    }

    pub fn data(&self) -> &TrialDataset {
        &self.data
    }

    fn clustered(&self) -> bool {
        !self.data.is_singleton()
    }

    /// Working structure actually used; exchangeable needs a cluster of size two.
    fn structure(&self) -> CorrStructure {
        if self.clustered() {
            self.config.working
        } else {
            CorrStructure::Independence
        }
    }

    fn all_candidates(&self) -> Vec<usize> {
        (0..self.data.n_covariates()).collect()
    }

    fn spec(&self, method: SelectionMethod, include_treatment: bool) -> SelectionSpec {
        SelectionSpec {
            method,
            include_treatment,
            candidate_indices: self.all_candidates(),
            cv_folds: self.config.folds,
            gamma: self.config.gamma,
            lambda_grid: None,
            grid_size: self.config.grid_size,
            seed: self.config.seed,
        }
    }

    fn selection_structure(&self) -> CorrStructure {
        if self.config.whiten {
            self.structure()
        } else {
            CorrStructure::Independence
        }
    }

    fn model_for(&mut self, adj: &Adjustment, purpose: Purpose, data: &TrialDataset) -> Result<FittedMeanModel> {
        let key = (adj.clone(), purpose);
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let include = purpose == Purpose::WithTreatment;
        let model = match adj {
            Adjustment::None => fit_mean_model(data, &[], include)?,
            Adjustment::Fixed(cols) => fit_mean_model(data, cols, include)?,
            Adjustment::Select(method) => {
                let spec = self.spec(*method, include);
                select_model(data, &spec, self.selection_structure())?
            }
        };
        self.models.insert(key, model.clone());
        Ok(model)
    }

    fn covariates_for(&mut self, adj: &Adjustment) -> Result<Vec<usize>> {
        match adj {
            Adjustment::None => Ok(Vec::new()),
            Adjustment::Fixed(cols) => Ok(cols.clone()),
            Adjustment::Select(_) => {
                let data = self.data.clone();
                Ok(self.model_for(adj, Purpose::WithTreatment, &data)?.selected)
            }
        }
    }

    fn working_start(&self) -> WorkingCovariance {
        match self.structure() {
            CorrStructure::Independence => WorkingCovariance::independence(),
            CorrStructure::Exchangeable => WorkingCovariance::exchangeable(1.0, 0.0),
        }
    }

    fn cmm(&mut self, adj: &Adjustment) -> Result<(TestResult, f64)> {
        let covariates = self.covariates_for(adj)?;
        let spec = MeanModelSpec {
            covariates,
            include_treatment: true,
        };
        let r = cmm_test(&self.data, &spec, &self.working_start(), &GeeOptions::default())?;
        Ok((r, spec.covariates.len() as f64))
    }

    fn augmented(&mut self, adj: &Adjustment) -> Result<(TestResult, f64)> {
        let opts = AugmentOptions {
            clustered: self.clustered(),
            working: self.structure(),
            correct_clustered: self.config.correct_clustered,
        };
        let data = self.data.clone();
        let mut sizes = Vec::new();
        let r = augmented_test(
            &data,
            |arm, a| {
                let m = self.model_for(adj, Purpose::Arm(a), arm)?;
                sizes.push(m.n_covariates() as f64);
                Ok(m)
            },
            &opts,
        )?;
        let mean = sizes.iter().sum::<f64>() / sizes.len().max(1) as f64;
        Ok((r, mean))
    }

    /// Scores for the randomization tests and the size of the null model.
    fn scores(&mut self, adj: &Adjustment) -> Result<(ScoreSet, f64)> {
        if let Some(s) = self.scores.get(adj) {
            return Ok(s.clone());
        }
        let data = if matches!(adj, Adjustment::None) && self.config.center {
            center_outcomes(&self.data)
        } else {
            self.data.clone()
        };
        let model = match adj {
            Adjustment::None => None,
            _ => Some(self.model_for(adj, Purpose::WithoutTreatment, &data)?),
        };
        let working = if self.clustered() {
            Some(match self.structure() {
                CorrStructure::Independence => WorkingCovariance::independence(),
                CorrStructure::Exchangeable => {
                    // V comes from null-model residuals and stays fixed over permutations.
                    let null = match &model {
                        Some(m) => m.clone(),
                        None => fit_mean_model(&data, &[], false)?,
                    };
                    let res = residuals(&null, &data)?;
                    estimate_working(CorrStructure::Exchangeable, &res, 1 + null.n_covariates())?
                }
            })
        } else {
            None
        };
        let scores = build_scores(&data, model.as_ref(), working.as_ref())?;
        let size = model.map_or(0.0, |m| m.n_covariates() as f64);
        self.scores.insert(adj.clone(), (scores.clone(), size));
        Ok((scores, size))
    }

    /// Runs one (method, adjustment) cell.
    pub fn run(&mut self, method: Method, adj: &Adjustment) -> Result<AnalysisRow> {
        let (mut result, n_selected) = match method {
            Method::Cmm => self.cmm(adj)?,
            Method::Augmented => self.augmented(adj)?,
            Method::ApproxExact | Method::ApproxExactBz | Method::Exact => {
                let (scores, size) = self.scores(adj)?;
                let a = self.data.treatments();
                let r = match method {
                    Method::ApproxExact => approx_exact_test(&scores, &a, Reference::Normal)?,
                    Method::ApproxExactBz => approx_exact_test(&scores, &a, Reference::Bz)?,
                    _ => exact_permutation_test(&scores, &a, &self.config.plan())?,
                };
                (r, size)
            }
        };
        result.adjustment = adj.to_string();
        Ok(AnalysisRow {
            method,
            adjustment: adj.to_string(),
            working: self.structure(),
            rejected: result.p_value < self.config.alpha,
            result,
            n_selected,
        })
    }
}

/// Every configured (method × adjustment) cell, adjustments outermost.
pub fn analyze(data: &TrialDataset, config: &AnalysisConfig) -> Result<Vec<AnalysisRow>> {
    let mut analyzer = Analyzer::new(data, config)?;
    let mut rows = Vec::new();
    for adj in &config.adjustments {
        for &method in &config.methods {
            rows.push(analyzer.run(method, adj)?);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClusterRecord, Unit};
    use crate::select::Criterion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(seed: u64, n: usize) -> TrialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<f64> = x.iter().zip(&a).map(|(v, &t)| v[0] * 2.0 + t as f64 * 0.3 + rng.random::<f64>()).collect();
        TrialDataset::from_scalar(&y, &a, &x).unwrap()
    }

    #[test]
    fn adjustment_round_trip() {
        for s in ["none", "aic", "bicn", "bicm", "alasso", "fixed:0,2,9"] {
            assert_eq!(s.parse::<Adjustment>().unwrap().to_string(), s);
        }
        assert!("fixed:a".parse::<Adjustment>().is_err());
        assert!("lasso".parse::<Adjustment>().is_err());
    }

    #[test]
    fn rows_cover_every_cell_and_models_are_shared() {
        let d = scalar(1, 30);
        let config = AnalysisConfig {
            adjustments: vec![Adjustment::None, Adjustment::Select(SelectionMethod::Forward(Criterion::Aic)), Adjustment::Fixed(vec![0])],
            permutations: 200,
            ..AnalysisConfig::default()
        };
        let rows = analyze(&d, &config).unwrap();
        assert_eq!(rows.len(), 15);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.result.p_value));
            assert_eq!(r.result.adjustment, r.adjustment);
        }
        // Approximate and exact tests share one statistic per adjustment.
        for chunk in rows.chunks(5) {
            assert_eq!(chunk[2].result.statistic, chunk[4].result.statistic);
            assert_eq!(chunk[2].result.statistic, chunk[3].result.statistic);
        }
    }

    #[test]
    fn unadjusted_scalar_matches_direct_calls() {
        let d = scalar(2, 20);
        let config = AnalysisConfig {
            permutations: 500,
            seed: 9,
            ..AnalysisConfig::default()
        };
        let rows = analyze(&d, &config).unwrap();
        let s = build_scores(&d, None, None).unwrap();
        let a = d.treatments();
        let direct = exact_permutation_test(&s, &a, &PermutationPlan::monte_carlo(500, 9)).unwrap();
        assert_eq!(rows[4].result.p_value, direct.p_value);
        let approx = approx_exact_test(&s, &a, Reference::Normal).unwrap();
        assert_eq!(rows[2].result.z_value, approx.z_value);
    }

    #[test]
    fn clustered_exchangeable_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clusters: Vec<ClusterRecord> = (0..12)
            .map(|i| {
                let b: f64 = rng.random();
                ClusterRecord {
                    id: format!("c{i}"),
                    treatment: (i % 2) as u8,
                    units: (0..(3 + i % 4))
                        .map(|_| {
                            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                            Unit { outcome: x[0] + b + rng.random::<f64>(), covariates: x }
                        })
                        .collect(),
                }
            })
            .collect();
        let d = TrialDataset::from_clusters(clusters).unwrap();
        let config = AnalysisConfig {
            adjustments: vec![Adjustment::None, Adjustment::Select(SelectionMethod::Forward(Criterion::BicN))],
            working: CorrStructure::Exchangeable,
            center: true,
            whiten: true,
            permutations: 200,
            ..AnalysisConfig::default()
        };
        let rows = analyze(&d, &config).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.working == CorrStructure::Exchangeable));
        let averaged = analyze(&d, &AnalysisConfig { cluster_average: true, ..config.clone() }).unwrap();
        assert!(averaged.iter().all(|r| r.working == CorrStructure::Independence));
    }

    #[test]
    fn config_validation() {
        let bad = AnalysisConfig { alpha: 1.5, ..AnalysisConfig::default() };
        assert!(analyze(&scalar(1, 10), &bad).is_err());
        let none = AnalysisConfig { permutations: 0, ..AnalysisConfig::default() };
        assert!(matches!(analyze(&scalar(1, 10), &none), Err(Error::NoPermutations)));
    }
}
