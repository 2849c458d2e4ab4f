//! Trial datasets: clusters of units sharing a treatment assignment.
//!
//! A dataset with one unit per cluster is the scalar-outcome case; the
//! clustered methods reduce to their independent-outcome counterparts on it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed unit: an outcome and its covariate vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

/// A randomized cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: String,
    /// Cluster-level treatment, 0 or 1.
    pub treatment: u8,
    pub units: Vec<Unit>,
}

impl ClusterRecord {
    pub fn size(&self) -> usize {
        self.units.len()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.outcome).collect()
    }
}

/// Immutable collection of clusters with a fixed treatment allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    clusters: Vec<ClusterRecord>,
    covariate_names: Vec<String>,
    n_treated: usize,
}

impl TrialDataset {
    /// Validates and builds a dataset. Allocation counts are taken from the data.
    pub fn new(clusters: Vec<ClusterRecord>, covariate_names: Vec<String>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::InvalidData("dataset has no clusters".into()));
        }
        let p = covariate_names.len();
        let mut n_treated = 0;
        for c in &clusters {
            if c.treatment > 1 {
                return Err(Error::InvalidData(format!(
                    "cluster `{}` has treatment {}",
                    c.id, c.treatment
                )));
            }
            if c.units.is_empty() {
                return Err(Error::InvalidData(format!("cluster `{}` has no units", c.id)));
            }
            for u in &c.units {
                if u.covariates.len() != p {
                    return Err(Error::InvalidData(format!(
                        "cluster `{}` has a unit with {} covariates, expected {}",
                        c.id,
                        u.covariates.len(),
                        p
                    )));
                }
                if !u.outcome.is_finite() || u.covariates.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidData(format!(
                        "cluster `{}` contains a non-finite value",
                        c.id
                    )));
                }
            }
            n_treated += c.treatment as usize;
        }
        Ok(Self {
            clusters,
            covariate_names,
            n_treated,
        })
    }

    /// Builds an unnamed dataset, naming covariates `x1..xp`.
    pub fn from_clusters(clusters: Vec<ClusterRecord>) -> Result<Self> {
        let p = clusters
            .first()
            .and_then(|c| c.units.first())
            .map(|u| u.covariates.len())
            .unwrap_or(0);
        let names = (1..=p).map(|k| format!("x{k}")).collect();
        Self::new(clusters, names)
    }

    /// Scalar-outcome dataset: every row is its own cluster.
    pub fn from_scalar(outcomes: &[f64], treatments: &[u8], covariates: &[Vec<f64>]) -> Result<Self> {
        if outcomes.len() != treatments.len() || outcomes.len() != covariates.len() {
            return Err(Error::InvalidData("input lengths differ".into()));
        }
        let clusters = outcomes
            .iter()
            .zip(treatments)
            .zip(covariates)
            .enumerate()
            .map(|(i, ((&y, &a), x))| ClusterRecord {
                id: i.to_string(),
                treatment: a,
                units: vec![Unit {
                    outcome: y,
                    covariates: x.clone(),
                }],
            })
            .collect();
        Self::from_clusters(clusters)
    }

    pub fn clusters(&self) -> &[ClusterRecord] {
        &self.clusters
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn n_control(&self) -> usize {
        self.clusters.len() - self.n_treated
    }

    pub fn n_arm(&self, arm: u8) -> usize {
        if arm == 1 {
            self.n_treated()
        } else {
            self.n_control()
        }
    }

    pub fn n_units(&self) -> usize {
        self.clusters.iter().map(|c| c.units.len()).sum()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Allocation fraction n₁/n.
    pub fn treatment_probability(&self) -> f64 {
        self.n_treated as f64 / self.clusters.len() as f64
    }

    pub fn treatments(&self) -> Vec<u8> {
        self.clusters.iter().map(|c| c.treatment).collect()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.clusters.iter().map(|c| c.units.len()).max().unwrap_or(0)
    }

    pub fn is_singleton(&self) -> bool {
        self.clusters.iter().all(|c| c.units.len() == 1)
    }

    /// Unit-level outcomes in cluster order.
    pub fn outcomes(&self) -> Vec<f64> {
        self.units().map(|(_, u)| u.outcome).collect()
    }

    /// Iterates over `(cluster index, unit)` pairs.
    pub fn units(&self) -> impl Iterator<Item = (usize, &Unit)> + '_ {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.units.iter().map(move |u| (i, u)))
    }

    /// Clusters in one arm, as a dataset of their own.
    pub fn arm(&self, arm: u8) -> Result<TrialDataset> {
        let clusters: Vec<_> = self
            .clusters
            .iter()
            .filter(|c| c.treatment == arm)
            .cloned()
            .collect();
        if clusters.is_empty() {
            return Err(Error::EmptyArm(arm));
        }
        TrialDataset::new(clusters, self.covariate_names.clone())
    }

    /// Same units with outcomes replaced cluster by cluster.
    pub fn with_outcomes(&self, outcomes: &[Vec<f64>]) -> Result<TrialDataset> {
        if outcomes.len() != self.clusters.len() {
            return Err(Error::InvalidData("outcome cluster count differs".into()));
        }
        let mut clusters = self.clusters.clone();
        for (c, ys) in clusters.iter_mut().zip(outcomes) {
            if ys.len() != c.units.len() {
                return Err(Error::InvalidData(format!("cluster `{}` size differs", c.id)));
            }
            for (u, &y) in c.units.iter_mut().zip(ys) {
                u.outcome = y;
            }
        }
        TrialDataset::new(clusters, self.covariate_names.clone())
    }

    /// Same clusters under a different treatment assignment.
    pub fn with_treatments(&self, treatments: &[u8]) -> Result<TrialDataset> {
        if treatments.len() != self.clusters.len() {
            return Err(Error::AssignmentLength {
                found: treatments.len(),
                expected: self.clusters.len(),
            });
        }
        let mut clusters = self.clusters.clone();
        for (c, &a) in clusters.iter_mut().zip(treatments) {
            c.treatment = a;
        }
        TrialDataset::new(clusters, self.covariate_names.clone())
    }
}

/// Collapses every cluster to a single unit holding the within-cluster means.
pub fn cluster_average(data: &TrialDataset) -> TrialDataset {
    let p = data.n_covariates();
    let clusters = data
        .clusters
        .iter()
        .map(|c| {
            let m = c.units.len() as f64;
            let mut xbar = vec![0.0; p];
            let mut ybar = 0.0;
            for u in &c.units {
                ybar += u.outcome;
                for (acc, x) in xbar.iter_mut().zip(&u.covariates) {
                    *acc += x;
                }
            }
            xbar.iter_mut().for_each(|v| *v /= m);
            ClusterRecord {
                id: c.id.clone(),
                treatment: c.treatment,
                units: vec![Unit {
                    outcome: ybar / m,
                    covariates: xbar,
                }],
            }
        })
        .collect();
    TrialDataset {
        clusters,
        covariate_names: data.covariate_names.clone(),
        n_treated: data.n_treated,
    }
}

/// Subtracts the grand mean of all unit-level outcomes.
pub fn center_outcomes(data: &TrialDataset) -> TrialDataset {
    let n = data.n_units() as f64;
    let mean = data.units().map(|(_, u)| u.outcome).sum::<f64>() / n;
    let mut out = data.clone();
    for c in &mut out.clusters {
        for u in &mut c.units {
            u.outcome -= mean;
        }
    }
    out
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Cluster identifier column; `None` makes every row its own cluster.
    pub cluster: Option<String>,
    pub treatment: String,
    pub outcome: String,
    /// Columns ignored entirely.
    pub exclude: Vec<String>,
    /// Categorical columns expanded to indicators, dropping the first level.
    pub nominal: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            cluster: Some("cluster".into()),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            exclude: Vec::new(),
            nominal: Vec::new(),
        }
    }
}

fn is_missing(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "NaN" | "nan" | "." | "null")
}

fn parse_number(row: usize, column: &str, raw: &str) -> Result<f64> {
    let s = raw.trim();
    if is_missing(s) {
        return Err(Error::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    s.parse::<f64>().map_err(|_| Error::NonNumeric {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Reads a trial from CSV. Rows of the same cluster need not be contiguous;
/// clusters keep the order of their first appearance.
pub fn load_trial_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TrialDataset> {
    let file = std::fs::File::open(path)?;
    read_trial_csv(file, schema)
}

pub fn read_trial_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cluster_col = schema.cluster.as_deref().map(find).transpose()?;
    let treat_col = find(&schema.treatment)?;
    let outcome_col = find(&schema.outcome)?;
    for name in schema.exclude.iter().chain(&schema.nominal) {
        find(name)?;
    }
    let reserved: BTreeSet<usize> = [Some(treat_col), Some(outcome_col), cluster_col]
        .into_iter()
        .flatten()
        .chain(schema.exclude.iter().map(|n| find(n).unwrap()))
        .collect();

    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;

    // Nominal levels are sorted so the indicator layout does not depend on row order.
    let mut levels: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for name in &schema.nominal {
        let col = find(name)?;
        let mut set = BTreeSet::new();
        for (r, rec) in records.iter().enumerate() {
            let v = rec.get(col).unwrap_or("").trim();
            if is_missing(v) {
                return Err(Error::MissingValue {
                    row: r + 1,
                    column: name.clone(),
                });
            }
            set.insert(v.to_string());
        }
        levels.insert(col, set.into_iter().collect());
    }

    let mut covariate_names = Vec::new();
    let mut layout = Vec::new();
    for (col, h) in headers.iter().enumerate() {
        if reserved.contains(&col) {
            continue;
        }
        if let Some(lv) = levels.get(&col) {
            for level in lv.iter().skip(1) {
                covariate_names.push(format!("{h}={level}"));
            }
        } else {
            covariate_names.push(h.clone());
        }
        layout.push(col);
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, ClusterRecord> = BTreeMap::new();
    for (r, rec) in records.iter().enumerate() {
        let row = r + 1;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let raw_a = field(treat_col).trim();
        let treatment = match raw_a {
            "0" | "0.0" => 0u8,
            "1" | "1.0" => 1u8,
            _ if is_missing(raw_a) => {
                return Err(Error::MissingValue {
                    row,
                    column: schema.treatment.clone(),
                })
            }
            _ => {
                return Err(Error::NonBinaryTreatment {
                    row,
                    value: raw_a.to_string(),
                })
            }
        };
        let outcome = parse_number(row, &schema.outcome, field(outcome_col))?;
        let mut covariates = Vec::with_capacity(covariate_names.len());
        for &col in &layout {
            let raw = field(col);
            if let Some(lv) = levels.get(&col) {
                let v = raw.trim();
                covariates.extend(lv.iter().skip(1).map(|l| if l == v { 1.0 } else { 0.0 }));
            } else {
                covariates.push(parse_number(row, &headers[col], raw)?);
            }
        }
        let id = match cluster_col {
            Some(c) => {
                let v = field(c).trim();
                if is_missing(v) {
                    return Err(Error::MissingValue {
                        row,
                        column: headers[c].clone(),
                    });
                }
                v.to_string()
            }
            None => r.to_string(),
        };
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            ClusterRecord {
                id: id.clone(),
                treatment,
                units: Vec::new(),
            }
        });
        if entry.treatment != treatment {
            return Err(Error::MixedTreatment(id));
        }
        entry.units.push(Unit {
            outcome,
            covariates,
        });
    }
    let clusters = order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("cluster recorded"))
        .collect();
    TrialDataset::new(clusters, covariate_names)
}

/// Writes the dataset in the layout `load_trial_csv` reads with the default schema.
pub fn write_trial_csv<W: Write>(data: &TrialDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster".to_string(), "treatment".into(), "outcome".into()];
    header.extend(data.covariate_names.iter().cloned());
    wtr.write_record(&header)?;
    for c in &data.clusters {
        for u in &c.units {
            let mut rec = vec![c.id.clone(), c.treatment.to_string(), format!("{}", u.outcome)];
            rec.extend(u.covariates.iter().map(|x| format!("{x}")));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_trial_csv(data: &TrialDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trial_csv(data, std::io::BufWriter::new(file))
}
