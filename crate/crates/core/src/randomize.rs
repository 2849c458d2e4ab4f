//! Randomization tests of the strong null: the score statistic under fixed
//! allocation, its analytic variance, a normal or Edgeworth-corrected
//! reference distribution, and the permutation test.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::gee::WorkingCovariance;
use crate::regression::{residuals, FittedMeanModel, Method, TestResult};
use crate::stats::{normal_cdf, normal_pdf, two_sided_p};

/// Default ceiling on the number of assignments enumerated exhaustively.
pub const DEFAULT_EXHAUSTIVE_CAP: u128 = 2_000_000;

/// Permutations drawn per RNG stream; fixed so results do not depend on thread count.
const CHUNK: usize = 1000;

/// Largest correction allowed on the standard normal CDF, in units of φ(t).
const BZ_CLAMP: f64 = 0.5;

/// Per-cluster scalar scores with the allocation they are permuted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    u: Vec<f64>,
    n_treated: usize,
}

impl ScoreSet {
    pub fn new(u: Vec<f64>, n_treated: usize) -> Result<Self> {
        if u.is_empty() {
            return Err(Error::InvalidData("empty score set".into()));
        }
        if n_treated > u.len() {
            return Err(Error::AllocationMismatch {
                found: n_treated,
                expected: u.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite score".into()));
        }
        Ok(Self { u, n_treated })
    }

    pub fn scores(&self) -> &[f64] {
        &self.u
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn allocation(&self) -> (usize, usize) {
        (self.u.len() - self.n_treated, self.n_treated)
    }

    pub fn pi(&self) -> f64 {
        self.n_treated as f64 / self.u.len() as f64
    }

    /// Absolute tolerance used when comparing permuted statistics for ties.
    fn tie_tolerance(&self) -> f64 {
        1e-10 * self.u.iter().map(|v| v.abs()).sum::<f64>()
    }
}

/// Scores `uᵢ = 1ᵀVᵢ⁻¹wᵢ` from residuals of a null model, or from raw outcomes.
///
/// Without a working covariance the residuals are summed within cluster.
pub fn build_scores(
    data: &TrialDataset,
    adjustment: Option<&FittedMeanModel>,
    working: Option<&WorkingCovariance>,
) -> Result<ScoreSet> {
    let w: Vec<Vec<f64>> = match adjustment {
        Some(model) => {
            if model.includes_treatment() {
                return Err(Error::TreatmentInAdjustment);
            }
            residuals(model, data)?
        }
        None => data
            .clusters()
            .iter()
            .map(|c| c.units.iter().map(|u| u.outcome).collect())
            .collect(),
    };
    let u = match working {
        Some(v) => {
            v.validate(data.max_cluster_size())?;
            w.iter().map(|wi| v.ones_inverse(wi)).collect()
        }
        None => w.iter().map(|wi| wi.iter().sum()).collect(),
    };
    ScoreSet::new(u, data.n_treated())
}

fn check_assignment(scores: &ScoreSet, assignment: &[u8]) -> Result<()> {
    if assignment.len() != scores.len() {
        return Err(Error::AssignmentLength {
            found: assignment.len(),
            expected: scores.len(),
        });
    }
    let found = assignment.iter().filter(|&&a| a == 1).count();
    if found != scores.n_treated || assignment.iter().any(|&a| a > 1) {
        return Err(Error::AllocationMismatch {
            found,
            expected: scores.n_treated,
        });
    }
    Ok(())
}

/// `S = Σ (aᵢ − π) uᵢ`.
pub fn score_statistic(scores: &ScoreSet, assignment: &[u8]) -> Result<f64> {
    check_assignment(scores, assignment)?;
    let pi = scores.pi();
    Ok(scores
        .u
        .iter()
        .zip(assignment)
        .map(|(u, &a)| (a as f64 - pi) * u)
        .sum())
}

/// Covariance of two distinct assignment indicators under fixed allocation.
pub fn q_coefficient(n: usize, pi: f64) -> f64 {
    let n = n as f64;
    pi * (n * pi - 1.0) / (n - 1.0) - pi * pi
}

/// `Var(S) = π(1−π)Σu² + Q Σ_{i≠i'} uᵢu_{i'}`.
pub fn randomization_variance(scores: &ScoreSet) -> f64 {
    let n = scores.len();
    if n < 2 {
        return 0.0;
    }
    let pi = scores.pi();
    let s1: f64 = scores.u.iter().sum();
    let s2: f64 = scores.u.iter().map(|v| v * v).sum();
    let v = pi * (1.0 - pi) * s2 + q_coefficient(n, pi) * (s1 * s1 - s2);
    v.max(0.0)
}

/// Exact permutation cumulants of `S` under fixed allocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationCumulants {
    pub variance: f64,
    /// Standardized third cumulant.
    pub skewness: f64,
    /// Standardized fourth cumulant.
    pub excess_kurtosis: f64,
}

/// Moments of a without-replacement sample sum from power sums of centered scores.
pub fn permutation_cumulants(scores: &ScoreSet) -> PermutationCumulants {
    let n = scores.len();
    let m = scores.n_treated as f64;
    let mean = scores.u.iter().sum::<f64>() / n as f64;
    let (mut p2, mut p3, mut p4) = (0.0, 0.0, 0.0);
    for v in &scores.u {
        let c = v - mean;
        let c2 = c * c;
        p2 += c2;
        p3 += c2 * c;
        p4 += c2 * c2;
    }
    let nf = n as f64;
    // f_b = m(m−1)…(m−b+1) / n(n−1)…(n−b+1)
    let mut f = [0.0; 5];
    f[0] = 1.0;
    for b in 1..5 {
        let k = (b - 1) as f64;
        f[b] = if nf - k > 0.0 { f[b - 1] * (m - k) / (nf - k) } else { 0.0 };
    }
    let e2 = p2 * (f[1] - f[2]);
    let e3 = p3 * (f[1] - 3.0 * f[2] + 2.0 * f[3]);
    let e4 = p4 * (f[1] - 7.0 * f[2] + 12.0 * f[3] - 6.0 * f[4])
        + 3.0 * p2 * p2 * (f[2] - 2.0 * f[3] + f[4]);
    let (skewness, excess_kurtosis) = if e2 > 0.0 {
        (e3 / e2.powf(1.5), (e4 - 3.0 * e2 * e2) / (e2 * e2))
    } else {
        (0.0, 0.0)
    };
    PermutationCumulants {
        variance: e2.max(0.0),
        skewness,
        excess_kurtosis,
    }
}

/// Probabilists' Hermite polynomials He₁…He₅ at `t`.
fn hermite(t: f64) -> [f64; 6] {
    let mut h = [0.0; 6];
    h[0] = 1.0;
    h[1] = t;
    for k in 2..6 {
        h[k] = t * h[k - 1] - (k - 1) as f64 * h[k - 2];
    }
    h
}

/// Coefficients `C₁, C₂, C₃, C₅` of the corrected distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BzCoefficients {
    pub pi: f64,
    pub c: [f64; 4],
}

impl BzCoefficients {
    pub fn from_cumulants(pi: f64, k: &PermutationCumulants) -> Self {
        let s = pi * (1.0 - pi);
        let k3 = k.skewness;
        let k4 = k.excess_kurtosis;
        Self {
            pi,
            c: [0.0, s * k3 / 6.0, s * k4 / 24.0, s * k3 * k3 / 72.0],
        }
    }

    pub fn zero(pi: f64) -> Self {
        Self { pi, c: [0.0; 4] }
    }

    /// `Φ(t) − φ(t)/(π(1−π)) [C₁H₁ + C₂H₂ + C₃H₃ + C₅H₅]`, clamped into [0, 1].
    pub fn cdf(&self, t: f64) -> f64 {
        if t == f64::INFINITY {
            return 1.0;
        }
        if t == f64::NEG_INFINITY {
            return 0.0;
        }
        if t.is_nan() {
            return f64::NAN;
        }
        let h = hermite(t);
        let bracket = self.c[0] * h[1] + self.c[1] * h[2] + self.c[2] * h[3] + self.c[3] * h[5];
        let k = (bracket / (self.pi * (1.0 - self.pi))).clamp(-BZ_CLAMP, BZ_CLAMP);
        (normal_cdf(t) - normal_pdf(t) * k).clamp(0.0, 1.0)
    }

    /// Two-sided tail probability `F(−|t|) + 1 − F(|t|)`.
    pub fn two_sided(&self, t: f64) -> f64 {
        let a = t.abs();
        (self.cdf(-a) + 1.0 - self.cdf(a)).clamp(0.0, 1.0)
    }

    /// Smallest `t` in [−12, 12] with `F(t) ≥ prob`, by bisection.
    pub fn quantile(&self, prob: f64) -> f64 {
        let (mut lo, mut hi) = (-12.0f64, 12.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) >= prob {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        hi
    }
}

/// Corrected coefficients for a score set.
pub fn bz_coefficients(scores: &ScoreSet) -> BzCoefficients {
    BzCoefficients::from_cumulants(scores.pi(), &permutation_cumulants(scores))
}

/// `P(T* < t)` under the higher-order corrected reference distribution.
pub fn bz_distribution(scores: &ScoreSet, t: f64) -> f64 {
    bz_coefficients(scores).cdf(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    Normal,
    Bz,
}

/// `T_s = S / sqrt(Var S)` referred to the normal or corrected distribution.
pub fn approx_exact_test(scores: &ScoreSet, assignment: &[u8], reference: Reference) -> Result<TestResult> {
    let s = score_statistic(scores, assignment)?;
    let var = randomization_variance(scores);
    let scale = scores.u.iter().map(|v| v * v).sum::<f64>();
    if !(var > 1e-14 * scale) || var == 0.0 {
        return Err(Error::DegenerateScores);
    }
    let se = var.sqrt();
    let z = s / se;
    let (method, p) = match reference {
        Reference::Normal => (Method::ApproxExact, two_sided_p(z)),
        Reference::Bz => (Method::ApproxExactBz, bz_coefficients(scores).two_sided(z)),
    };
    Ok(TestResult {
        method,
        statistic: s,
        std_error: Some(se),
        z_value: Some(z),
        p_value: p,
        adjustment: String::new(),
    })
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Lexicographic k-subsets of `0..n`.
struct Combinations {
    idx: Vec<usize>,
    n: usize,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            idx: (0..k).collect(),
            n,
            done: k > n,
        }
    }

    fn current(&self) -> Option<&[usize]> {
        (!self.done).then_some(self.idx.as_slice())
    }

    fn advance(&mut self) {
        let k = self.idx.len();
        let mut i = k;
        while i > 0 {
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                return;
            }
        }
        self.done = true;
    }
}

/// Every fixed-allocation assignment of `n1` treated among `n`, in lexicographic order
/// of the treated index sets.
pub fn enumerate_assignments(n: usize, n1: usize, cap: u128) -> Result<impl Iterator<Item = Vec<u8>>> {
    let count = binomial(n, n1);
    if count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    let mut combos = Combinations::new(n, n1);
    Ok(std::iter::from_fn(move || {
        let out = combos.current().map(|idx| {
            let mut a = vec![0u8; n];
            for &i in idx {
                a[i] = 1;
            }
            a
        });
        combos.advance();
        out
    }))
}

/// Calls `f` with `S` for every fixed-allocation assignment.
pub fn for_each_permuted_statistic<F: FnMut(f64)>(scores: &ScoreSet, cap: u128, mut f: F) -> Result<()> {
    let n = scores.len();
    let count = binomial(n, scores.n_treated);
    if count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    let offset = scores.pi() * scores.u.iter().sum::<f64>();
    let mut combos = Combinations::new(n, scores.n_treated);
    while let Some(idx) = combos.current() {
        f(idx.iter().map(|&i| scores.u[i]).sum::<f64>() - offset);
        combos.advance();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationPlan {
    Exhaustive { cap: u128 },
    MonteCarlo { permutations: usize, seed: u64 },
}

impl PermutationPlan {
    pub fn monte_carlo(permutations: usize, seed: u64) -> Self {
        PermutationPlan::MonteCarlo { permutations, seed }
    }

    pub fn exhaustive() -> Self {
        PermutationPlan::Exhaustive {
            cap: DEFAULT_EXHAUSTIVE_CAP,
        }
    }
}

impl fmt::Display for PermutationPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PermutationPlan::Exhaustive { cap } => write!(f, "exhaustive(cap={cap})"),
            PermutationPlan::MonteCarlo { permutations, seed } => {
                write!(f, "monte-carlo(B={permutations},seed={seed})")
            }
        }
    }
}

impl FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Reference::Normal),
            "bz" => Ok(Reference::Bz),
            _ => Err(Error::Config(format!("unknown reference `{s}`"))),
        }
    }
}

/// Number of sampled statistics with `|S_b| ≥ threshold`.
fn sampled_exceedances(scores: &ScoreSet, permutations: usize, seed: u64, threshold: f64) -> usize {
    let n = scores.len();
    let total: f64 = scores.u.iter().sum();
    let offset = scores.pi() * total;
    // Draw whichever side is smaller; the treated sum is then recovered from the total.
    let (k, complement) = if scores.n_treated <= n / 2 {
        (scores.n_treated, false)
    } else {
        (n - scores.n_treated, true)
    };
    let chunks = permutations.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            let draws = CHUNK.min(permutations - chunk * CHUNK);
            let mut hits = 0usize;
            for _ in 0..draws {
                let mut sum = 0.0;
                for i in 0..k {
                    let j = rng.random_range(i..n);
                    idx.swap(i, j);
                    sum += scores.u[idx[i]];
                }
                let treated = if complement { total - sum } else { sum };
                if (treated - offset).abs() >= threshold {
                    hits += 1;
                }
            }
            hits
        })
        .sum()
}

/// Two-sided permutation test on `|S|`.
pub fn exact_permutation_test(scores: &ScoreSet, assignment: &[u8], plan: &PermutationPlan) -> Result<TestResult> {
    let observed = score_statistic(scores, assignment)?;
    let threshold = observed.abs() - scores.tie_tolerance();
    let p = match *plan {
        PermutationPlan::Exhaustive { cap } => {
            let mut hits = 0u64;
            let mut total = 0u64;
            for_each_permuted_statistic(scores, cap, |s| {
                total += 1;
                if s.abs() >= threshold {
                    hits += 1;
                }
            })?;
            hits as f64 / total as f64
        }
        PermutationPlan::MonteCarlo { permutations, seed } => {
            if permutations < 1 {
                return Err(Error::NoPermutations);
            }
            let hits = sampled_exceedances(scores, permutations, seed, threshold);
            (1 + hits) as f64 / (permutations + 1) as f64
        }
    };
    Ok(TestResult {
        method: Method::Exact,
        statistic: observed,
        std_error: None,
        z_value: None,
        p_value: p.clamp(0.0, 1.0),
        adjustment: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{center_outcomes, ClusterRecord, Unit};
    use crate::gee::WorkingCovariance;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn set(u: &[f64], n1: usize) -> ScoreSet {
        ScoreSet::new(u.to_vec(), n1).unwrap()
    }

    /// Mean and variance of S over all assignments.
    fn enumerated_moments(s: &ScoreSet) -> (f64, f64) {
        let mut vals = Vec::new();
        for a in enumerate_assignments(s.len(), s.n_treated(), u128::MAX).unwrap() {
            vals.push(score_statistic(s, &a).unwrap());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn statistic_examples() {
        let s = set(&[1.0, 1.0, -1.0, -1.0], 2);
        assert_eq!(score_statistic(&s, &[1, 1, 0, 0]).unwrap(), 2.0);
        assert_eq!(score_statistic(&set(&[0.0; 4], 2), &[1, 0, 1, 0]).unwrap(), 0.0);
        let c = set(&[3.5; 6], 2);
        assert!(score_statistic(&c, &[0, 1, 0, 0, 1, 0]).unwrap().abs() < 1e-14);
        assert!(matches!(
            score_statistic(&s, &[1, 1, 1, 0]),
            Err(Error::AllocationMismatch { found: 3, expected: 2 })
        ));
        assert!(matches!(score_statistic(&s, &[1, 1, 0]), Err(Error::AssignmentLength { .. })));
    }

    #[test]
    fn variance_examples() {
        let s = set(&[1.0, 1.0, -1.0, -1.0], 2);
        assert!((q_coefficient(4, 0.5) + 1.0 / 12.0).abs() < 1e-15);
        assert!((randomization_variance(&s) - 4.0 / 3.0).abs() < 1e-14);
        let (mean, var) = enumerated_moments(&s);
        assert!(mean.abs() < 1e-14);
        assert!((var - 8.0 / 6.0).abs() < 1e-14);
        assert_eq!(randomization_variance(&set(&[0.0; 5], 2)), 0.0);

        let u = [2.0, -0.5, 1.5, -3.0, 0.25, -0.25];
        let s2: f64 = u.iter().map(|v| v * v).sum();
        let s = set(&u, 3);
        let expect = 0.25 * s2 + s2 / (4.0 * 5.0);
        assert!((randomization_variance(&s) - expect).abs() < 1e-12);
        assert!((enumerated_moments(&s).1 - expect).abs() < 1e-12);
    }

    #[test]
    fn unequal_allocation_uses_without_replacement_covariance() {
        // The equal-allocation specialisation π(n/2−1)/(n−1) − π² differs once π ≠ 1/2.
        let printed = |n: usize, pi: f64| pi * (n as f64 / 2.0 - 1.0) / (n as f64 - 1.0) - pi * pi;
        let u = [1.2, -0.4, 2.2, 0.1, -1.7, 0.9, 3.0];
        let s = set(&u, 2);
        let (_, enumerated) = enumerated_moments(&s);
        assert!((randomization_variance(&s) - enumerated).abs() < 1e-12 * enumerated);
        let s1: f64 = u.iter().sum();
        let s2: f64 = u.iter().map(|v| v * v).sum();
        let pi = s.pi();
        let naive = pi * (1.0 - pi) * s2 + printed(7, pi) * (s1 * s1 - s2);
        assert!((naive - enumerated).abs() > 1e-3);
        assert!((q_coefficient(7, pi) + pi * (1.0 - pi) / 6.0).abs() < 1e-15);
        assert!((printed(10, 0.5) - q_coefficient(10, 0.5)).abs() < 1e-15);
    }

    #[test]
    fn cumulants_match_enumeration() {
        for (u, n1) in [
            (vec![0.1, 5.0, -1.0, 0.3, 0.2, 2.5, -0.7, 0.0, 9.0], 4),
            (vec![1.0, 2.0, 4.0, 8.0, 16.0, 0.5, 0.25, 3.0], 4),
            (vec![1.0, 2.0, 4.0, 8.0, 16.0, 0.5, 0.25, 3.0], 3),
        ] {
            let s = set(&u, n1);
            let mut vals = Vec::new();
            for_each_permuted_statistic(&s, u128::MAX, |v| vals.push(v)).unwrap();
            let n = vals.len() as f64;
            let m2 = vals.iter().map(|v| v * v).sum::<f64>() / n;
            let m3 = vals.iter().map(|v| v.powi(3)).sum::<f64>() / n;
            let m4 = vals.iter().map(|v| v.powi(4)).sum::<f64>() / n;
            let k = permutation_cumulants(&s);
            assert!((k.variance - m2).abs() < 1e-10 * m2);
            assert!((k.skewness - m3 / m2.powf(1.5)).abs() < 1e-10);
            assert!((k.excess_kurtosis - (m4 / (m2 * m2) - 3.0)).abs() < 1e-10);
        }
        // Half allocation makes the distribution symmetric.
        let k = permutation_cumulants(&set(&[0.1, 5.0, -1.0, 0.3, 0.2, 2.5], 3));
        assert!(k.skewness.abs() < 1e-12);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_assignments(4, 2, 100).unwrap().count(), 6);
        let single: Vec<Vec<u8>> = enumerate_assignments(2, 0, 100).unwrap().collect();
        assert_eq!(single, vec![vec![0, 0]]);
        let all: Vec<Vec<u8>> = enumerate_assignments(12, 6, DEFAULT_EXHAUSTIVE_CAP).unwrap().collect();
        assert_eq!(all.len(), 924);
        let distinct: HashSet<Vec<u8>> = all.iter().cloned().collect();
        assert_eq!(distinct.len(), 924);
        assert!(all.iter().all(|a| a.iter().filter(|&&v| v == 1).count() == 6));
        assert!(matches!(
            enumerate_assignments(40, 20, DEFAULT_EXHAUSTIVE_CAP),
            Err(Error::CapExceeded { .. })
        ));
        assert_eq!(binomial(14, 7), 3432);
        assert_eq!(binomial(200, 100) > DEFAULT_EXHAUSTIVE_CAP, true);
    }

    #[test]
    fn exact_test_examples() {
        let s = set(&[1.0, 1.0, -1.0, -1.0], 2);
        let r = exact_permutation_test(&s, &[1, 1, 0, 0], &PermutationPlan::exhaustive()).unwrap();
        assert!((r.p_value - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.statistic, 2.0);
        assert!(r.std_error.is_none() && r.z_value.is_none());

        let c = set(&[2.0; 6], 3);
        let a = [1, 0, 1, 0, 1, 0];
        assert_eq!(exact_permutation_test(&c, &a, &PermutationPlan::exhaustive()).unwrap().p_value, 1.0);
        assert_eq!(exact_permutation_test(&c, &a, &PermutationPlan::monte_carlo(50, 1)).unwrap().p_value, 1.0);
        assert!(matches!(
            exact_permutation_test(&c, &a, &PermutationPlan::monte_carlo(0, 1)),
            Err(Error::NoPermutations)
        ));
    }

    #[test]
    fn monte_carlo_is_seed_deterministic_and_close() {
        let u: Vec<f64> = (0..12).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7 + (i as f64).sqrt()).collect();
        let s = set(&u, 6);
        let a: Vec<u8> = (0..12).map(|i| (i < 6) as u8).collect();
        let plan = PermutationPlan::monte_carlo(20_000, 42);
        let r1 = exact_permutation_test(&s, &a, &plan).unwrap();
        let r2 = exact_permutation_test(&s, &a, &plan).unwrap();
        assert_eq!(r1.p_value, r2.p_value);
        let exact = exact_permutation_test(&s, &a, &PermutationPlan::exhaustive()).unwrap().p_value;
        let tol = 4.0 * (exact * (1.0 - exact) / 20_000.0).sqrt() + 1.0 / 20_001.0;
        assert!((r1.p_value - exact).abs() < tol, "{} vs {}", r1.p_value, exact);
        // Worker count does not matter.
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let r3 = pool.install(|| exact_permutation_test(&s, &a, &plan).unwrap());
        assert_eq!(r1.p_value, r3.p_value);
    }

    #[test]
    fn approx_exact_examples() {
        let s = set(&[1.0, 1.0, -1.0, -1.0], 2);
        let r = approx_exact_test(&s, &[1, 1, 0, 0], Reference::Normal).unwrap();
        assert!((r.z_value.unwrap() - 2.0 / (4.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert!(matches!(
            approx_exact_test(&set(&[1.0; 4], 2), &[1, 1, 0, 0], Reference::Normal),
            Err(Error::DegenerateScores)
        ));
        assert!(matches!(
            approx_exact_test(&set(&[1.0; 4], 2), &[1, 1, 0, 0], Reference::Bz),
            Err(Error::DegenerateScores)
        ));
    }

    #[test]
    fn reference_anchor_normal() {
        let z: f64 = 2.713 / 0.814;
        assert!((z - 3.334).abs() < 5e-3);
        assert!((two_sided_p(z) - 0.0009).abs() < 5e-5);
    }

    #[test]
    fn antithetic_scores_normal_close_to_enumeration() {
        let c = [0.3, 1.1, 0.7, 2.0, 0.5, 1.4];
        let u: Vec<f64> = c.iter().flat_map(|&v| [v, -v]).collect();
        let s = set(&u, 6);
        let a: Vec<u8> = (0..12).map(|i| ((i % 4) < 2) as u8).collect();
        let normal = approx_exact_test(&s, &a, Reference::Normal).unwrap().p_value;
        let exact = exact_permutation_test(&s, &a, &PermutationPlan::exhaustive()).unwrap().p_value;
        assert!((normal - exact).abs() < 0.05, "{normal} vs {exact}");
    }

    #[test]
    fn bz_limits() {
        let z = BzCoefficients::zero(0.5);
        for t in [-3.0, -0.5, 0.0, 1.2, 4.0] {
            assert_eq!(z.cdf(t), normal_cdf(t));
        }
        let b = bz_coefficients(&set(&[0.1, 9.0, 0.2, 0.3, 0.1, 0.5, 0.05, 0.4], 3));
        assert_eq!(b.cdf(f64::INFINITY), 1.0);
        assert_eq!(b.cdf(f64::NEG_INFINITY), 0.0);
        for t in [-50.0, -5.0, 0.0, 5.0, 50.0] {
            let v = b.cdf(t);
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((z.quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn centering_zeroes_enumerated_mean_with_size_imbalance() {
        let mut clusters = Vec::new();
        for i in 0..8 {
            let a = (i % 2) as u8;
            let size = if a == 1 { 4 } else { 1 };
            clusters.push(ClusterRecord {
                id: i.to_string(),
                treatment: a,
                units: (0..size).map(|j| Unit { outcome: 2.0 + j as f64 * 0.1, covariates: vec![] }).collect(),
            });
        }
        let d = crate::data::TrialDataset::from_clusters(clusters).unwrap();
        let ind = WorkingCovariance::independence();
        let raw = build_scores(&d, None, Some(&ind)).unwrap();
        assert!(enumerated_moments(&raw).0.abs() < 1e-10);
        let obs = score_statistic(&raw, &d.treatments()).unwrap();
        assert!(obs > 1.0);
        let centered = build_scores(&center_outcomes(&d), None, Some(&ind)).unwrap();
        assert!(centered.scores().iter().sum::<f64>().abs() < 1e-10);
        assert!(enumerated_moments(&centered).0.abs() < 1e-10);
    }

    #[test]
    fn build_scores_examples() {
        let d = crate::data::TrialDataset::from_scalar(&[1.0, 4.0, 2.0, 3.0], &[1, 0, 1, 0], &vec![vec![0.5]; 4]).unwrap();
        assert_eq!(build_scores(&d, None, None).unwrap().scores(), &[1.0, 4.0, 2.0, 3.0]);
        let with_a = FittedMeanModel::from_coefficients(vec![], true, &nalgebra::DVector::from_vec(vec![1.0, 1.0]), 0.0, 4, 0.0);
        assert!(matches!(build_scores(&d, Some(&with_a), None), Err(Error::TreatmentInAdjustment)));

        let pair = crate::data::TrialDataset::from_clusters(vec![
            ClusterRecord { id: "a".into(), treatment: 1, units: vec![Unit { outcome: 1.0, covariates: vec![] }, Unit { outcome: 0.0, covariates: vec![] }] },
            ClusterRecord { id: "b".into(), treatment: 0, units: vec![Unit { outcome: 0.0, covariates: vec![] }, Unit { outcome: 0.0, covariates: vec![] }] },
        ])
        .unwrap();
        let ex = WorkingCovariance::exchangeable(1.0, 0.5);
        let s = build_scores(&pair, None, Some(&ex)).unwrap();
        assert!((s.scores()[0] - 2.0 / 3.0).abs() < 1e-15);
        let ind = build_scores(&pair, None, Some(&WorkingCovariance::independence())).unwrap();
        assert_eq!(ind.scores()[0], 1.0);
    }

    proptest! {
        #[test]
        fn enumerated_mean_zero_and_variance_identity(u in prop::collection::vec(-5.0f64..5.0, 2..11), k in 0usize..10) {
            let n = u.len();
            let n1 = k % (n + 1);
            let s = ScoreSet::new(u, n1).unwrap();
            let (mean, var) = enumerated_moments(&s);
            let scale = s.scores().iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!(mean.abs() < 1e-10 * scale);
            let v = randomization_variance(&s);
            prop_assert!((v - var).abs() <= 1e-10 * var.max(1e-12) + 1e-12);
        }

        #[test]
        fn permutation_p_scale_invariant(u in prop::collection::vec(-5.0f64..5.0, 4..10), c in prop_oneof![0.01f64..100.0, -100.0f64..-0.01]) {
            let n = u.len();
            let n1 = n / 2;
            let a: Vec<u8> = (0..n).map(|i| (i < n1) as u8).collect();
            let base = exact_permutation_test(&ScoreSet::new(u.clone(), n1).unwrap(), &a, &PermutationPlan::exhaustive()).unwrap();
            let scaled: Vec<f64> = u.iter().map(|v| v * c).collect();
            let other = exact_permutation_test(&ScoreSet::new(scaled, n1).unwrap(), &a, &PermutationPlan::exhaustive()).unwrap();
            prop_assert_eq!(base.p_value, other.p_value);
        }
    }
}
