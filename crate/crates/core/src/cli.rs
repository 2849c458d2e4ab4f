//! Command-line front end: `analyze` runs the tests on a CSV trial and
//! `simulate` runs a Monte Carlo study on a named design.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{Adjustment, AnalysisConfig, Analyzer};
use crate::data::{load_trial_csv, CsvSchema};
use crate::error::{Error, Result};
use crate::gee::CorrStructure;
use crate::randomize::DEFAULT_EXHAUSTIVE_CAP;
use crate::regression::Method;
use crate::select::Folds;
use crate::simulate::{monte_carlo_study, DesignKind, SimulationDesign, MIN_REPS};

#[derive(Debug, Parser)]
#[command(name = "covadj", version, about = "Covariate-adjusted tests of treatment effect")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run tests on a trial stored as CSV.
    Analyze(AnalyzeArgs),
    /// Monte Carlo type I error and power for a named design.
    Simulate(SimulateArgs),
}

/// Options shared by both subcommands.
#[derive(Debug, Args)]
pub struct Common {
    /// Test to run; repeatable. Defaults to every method.
    #[arg(long = "method", value_parser = parse_method)]
    pub methods: Vec<Method>,
    /// none, aic, bicn, bicm, alasso or fixed:<i,j,..> (zero-based); repeatable.
    #[arg(long = "adjust")]
    pub adjustments: Vec<String>,
    /// Working correlation; repeatable.
    #[arg(long = "working", value_parser = parse_working)]
    pub workings: Vec<CorrStructure>,
    /// Collapse clusters to their means before analysis.
    #[arg(long)]
    pub cluster_average: bool,
    /// Mean-center outcomes in the unadjusted randomization tests.
    #[arg(long)]
    pub center: bool,
    /// Monte Carlo permutations for the exact test.
    #[arg(long = "permutations", default_value_t = 1000)]
    pub permutations: usize,
    /// Enumerate every assignment instead of sampling.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long, default_value_t = DEFAULT_EXHAUSTIVE_CAP)]
    pub exhaustive_cap: u128,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05, value_parser = parse_alpha)]
    pub alpha: f64,
    /// Cross-validation folds for the adaptive LASSO: a count or `n/10`.
    #[arg(long, value_parser = parse_folds)]
    pub folds: Option<Folds>,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 100)]
    pub grid_size: usize,
    /// Re-select on whitened data under an exchangeable working correlation.
    #[arg(long)]
    pub whiten: bool,
    /// Skip the correction factor in the clustered augmented variance.
    #[arg(long)]
    pub no_clustered_correction: bool,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "COVADJ_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Cluster id column; omit with --no-cluster for one unit per cluster.
    #[arg(long, default_value = "cluster")]
    pub cluster_col: String,
    #[arg(long)]
    pub no_cluster: bool,
    #[arg(long, default_value = "treatment")]
    pub treatment_col: String,
    #[arg(long, default_value = "outcome")]
    pub outcome_col: String,
    /// Column to ignore; repeatable.
    #[arg(long)]
    pub exclude: Vec<String>,
    /// Categorical column expanded to indicators; repeatable.
    #[arg(long)]
    pub nominal: Vec<String>,
    /// Format written to --out.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Named design.
    #[arg(long)]
    pub design: String,
    /// `key = value` file overriding fields of the named design.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_per_arm: Option<usize>,
    #[arg(long)]
    pub cluster_size: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(MIN_REPS as u64..))]
    pub reps: u64,
    /// Write the resolved design as `key = value` lines.
    #[arg(long)]
    pub save_design: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_working(s: &str) -> std::result::Result<CorrStructure, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_folds(s: &str) -> std::result::Result<Folds, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_alpha(s: &str) -> std::result::Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha must lie in (0, 1), got {a}"))
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Common {
    fn config(&self, adjustments: Vec<Adjustment>, default_folds: Folds) -> AnalysisConfig {
        AnalysisConfig {
            methods: if self.methods.is_empty() { Method::ALL.to_vec() } else { self.methods.clone() },
            adjustments,
            working: CorrStructure::Independence,
            cluster_average: self.cluster_average,
            center: self.center,
            permutations: self.permutations,
            exhaustive: self.exhaustive,
            exhaustive_cap: self.exhaustive_cap,
            seed: self.seed,
            alpha: self.alpha,
            folds: self.folds.unwrap_or(default_folds),
            gamma: self.gamma,
            grid_size: self.grid_size,
            whiten: self.whiten,
            correct_clustered: !self.no_clustered_correction,
        }
    }

    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(default_workers).max(1)
    }
}

/// Resolves `correct` and `incorrect` against a simulation design.
fn parse_adjustments(raw: &[String], design: Option<&SimulationDesign>) -> Result<Vec<Adjustment>> {
    raw.iter()
        .map(|s| match (s.as_str(), design) {
            ("correct", Some(d)) => Ok(Adjustment::Fixed(d.correct_model())),
            ("incorrect", Some(d)) => Ok(Adjustment::Fixed(d.incorrect_model())),
            _ => s.parse(),
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct RowOut {
    method: Method,
    adjustment: String,
    working: CorrStructure,
    statistic: Option<f64>,
    std_error: Option<f64>,
    z_value: Option<f64>,
    p_value: Option<f64>,
    n_selected: Option<f64>,
    rejected: Option<bool>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct AnalyzeOutput<'a> {
    version: &'static str,
    seed: u64,
    input: String,
    schema: &'a CsvSchema,
    configs: &'a [AnalysisConfig],
    rows: Vec<RowOut>,
}

fn dash(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "--".to_string(), |x| format!("{x:.prec$}"))
}

fn render_text(out: &AnalyzeOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# covadj {}  seed = {}  input = {}", out.version, out.seed, out.input);
    let _ = writeln!(
        s,
        "{:<16} {:<14} {:<6} {:>12} {:>10} {:>8} {:>8} {:>8}",
        "method", "adjustment", "work", "estimate", "se", "z", "p", "selected"
    );
    for r in &out.rows {
        if let Some(e) = &r.error {
            let _ = writeln!(s, "{:<16} {:<14} {:<6} error: {e}", r.method.to_string(), r.adjustment, r.working.to_string());
            continue;
        }
        let _ = writeln!(
            s,
            "{:<16} {:<14} {:<6} {:>12} {:>10} {:>8} {:>8} {:>8}",
            r.method.to_string(),
            r.adjustment,
            r.working.to_string(),
            dash(r.statistic, 4),
            dash(r.std_error, 4),
            dash(r.z_value, 3),
            dash(r.p_value, 4),
            dash(r.n_selected, 2),
        );
    }
    s
}

/// Runs `analyze`; returns whether every cell succeeded.
pub fn run_analyze(args: &AnalyzeArgs) -> Result<bool> {
    let schema = CsvSchema {
        cluster: (!args.no_cluster).then(|| args.cluster_col.clone()),
        treatment: args.treatment_col.clone(),
        outcome: args.outcome_col.clone(),
        exclude: args.exclude.clone(),
        nominal: args.nominal.clone(),
    };
    let data = load_trial_csv(&args.input, &schema)?;
    let c = &args.common;
    let raw = if c.adjustments.is_empty() { vec!["none".to_string()] } else { c.adjustments.clone() };
    let adjustments = parse_adjustments(&raw, None)?;
    let workings = if c.workings.is_empty() { vec![CorrStructure::Independence] } else { c.workings.clone() };
    let configs: Vec<AnalysisConfig> = workings
        .iter()
        .map(|&w| AnalysisConfig { working: w, ..c.config(adjustments.clone(), Folds::Fixed(5)) })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.workers())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| -> Result<Vec<RowOut>> {
        let mut rows = Vec::new();
        for config in &configs {
            let mut analyzer = Analyzer::new(&data, config)?;
            for adj in &config.adjustments {
                for &method in &config.methods {
                    rows.push(match analyzer.run(method, adj) {
                        Ok(r) => RowOut {
                            method,
                            adjustment: r.adjustment,
                            working: r.working,
                            statistic: Some(r.result.statistic),
                            std_error: r.result.std_error,
                            z_value: r.result.z_value,
                            p_value: Some(r.result.p_value),
                            n_selected: Some(r.n_selected),
                            rejected: Some(r.rejected),
                            error: None,
                        },
                        Err(e) => RowOut {
                            method,
                            adjustment: adj.to_string(),
                            working: config.working,
                            statistic: None,
                            std_error: None,
                            z_value: None,
                            p_value: None,
                            n_selected: None,
                            rejected: None,
                            error: Some(e.to_string()),
                        },
                    });
                }
            }
        }
        Ok(rows)
    })?;
    let ok = rows.iter().all(|r| r.error.is_none());
    for r in rows.iter().filter_map(|r| r.error.as_ref().map(|e| (r, e))) {
        eprintln!("error: {}/{}/{}: {}", r.0.method, r.0.adjustment, r.0.working, r.1);
    }
    let out = AnalyzeOutput {
        version: env!("CARGO_PKG_VERSION"),
        seed: c.seed,
        input: args.input.display().to_string(),
        schema: &schema,
        configs: &configs,
        rows,
    };
    let text = render_text(&out);
    match (&c.out, args.format) {
        (Some(p), Format::Json) => {
            std::fs::write(p, serde_json::to_string_pretty(&out)? + "\n")?;
            print!("{text}");
        }
        (Some(p), Format::Text) => std::fs::write(p, &text)?,
        (None, Format::Json) => println!("{}", serde_json::to_string_pretty(&out)?),
        (None, Format::Text) => print!("{text}"),
    }
    Ok(ok)
}

/// Runs `simulate`; the report aborts with an error if a cell fails too often.
pub fn run_simulate(args: &SimulateArgs) -> Result<bool> {
    let mut design = SimulationDesign::named(&args.design)?;
    if let Some(path) = &args.config {
        design = SimulationDesign::from_kv(&std::fs::read_to_string(path)?, &design)?;
    }
    if let Some(n) = args.n_per_arm {
        design.n_per_arm = n;
    }
    if let Some(m) = args.cluster_size {
        design.cluster_size = m;
    }
    let c = &args.common;
    design.seed = c.seed;
    design.validate()?;
    if let Some(p) = &args.save_design {
        std::fs::write(p, design.to_kv())?;
    }
    let clustered = design.kind == DesignKind::Clustered;
    let raw: Vec<String> = if c.adjustments.is_empty() {
        let mut v = vec!["none", "aic"];
        if clustered {
            v.push("bicn");
        }
        v.extend(["bicm", "alasso", "correct", "incorrect"]);
        v.into_iter().map(String::from).collect()
    } else {
        c.adjustments.clone()
    };
    let adjustments = parse_adjustments(&raw, Some(&design))?;
    let workings = match (c.workings.is_empty(), clustered) {
        (false, _) => c.workings.clone(),
        (true, true) => vec![CorrStructure::Independence, CorrStructure::Exchangeable],
        (true, false) => vec![CorrStructure::Independence],
    };
    let default_folds = if clustered { Folds::Fixed(5) } else { Folds::PerTen };
    let configs: Vec<AnalysisConfig> = workings
        .iter()
        .map(|&w| AnalysisConfig { working: w, ..c.config(adjustments.clone(), default_folds) })
        .collect();
    let report = monte_carlo_study(&design, &configs, args.reps as usize, c.seed, c.workers())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    match &c.out {
        Some(p) => {
            std::fs::write(p, &csv)?;
            print!("{}", report.to_table());
        }
        None => {
            print!("{}", String::from_utf8_lossy(&csv));
            eprint!("{}", report.to_table());
        }
    }
    Ok(report.cells.iter().all(|cell| cell.errors == 0))
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Analyze(a) => run_analyze(a),
        Command::Simulate(s) => run_simulate(s),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
