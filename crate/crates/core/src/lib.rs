//! Covariate-adjusted tests of treatment effect for randomized trials,
//! including cluster-randomized trials.

pub mod analysis;
pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod gee;
pub mod randomize;
pub mod regression;
pub mod select;
pub mod simulate;
pub mod stats;

pub use data::{ClusterRecord, CsvSchema, TrialDataset, Unit};
pub use error::{Error, Result};
pub use gee::{CorrStructure, GeeFit, GeeOptions, MeanModelSpec, WorkingCovariance};
pub use regression::{FittedMeanModel, Method, TestResult};
pub use analysis::{analyze, Adjustment, AnalysisConfig, AnalysisRow};
pub use simulate::{monte_carlo_study, MonteCarloReport, SimulationDesign};
