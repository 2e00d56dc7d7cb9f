//! Contingency tables and the significance tests used by the pipeline:
//! Pearson chi-square with log-space tail probabilities, McNemar on paired
//! correctness, and the one-sided Mann-Whitney U test.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Significance level used for every accept/reject decision.
pub const ALPHA: f64 = 0.05;

/// Minimum expected count per cell for the chi-square approximation.
pub const MIN_EXPECTED: f64 = 5.0;

const MAX_ITER: usize = 10_000;
const CF_TINY: f64 = 1e-300;

/// `ln Q(a, x)`, the log of the regularized upper incomplete gamma function.
///
/// Series for `P` when `x < a + 1`, Lentz continued fraction for `Q`
/// otherwise; the continued-fraction branch never leaves log space, so
/// tails far below `f64::MIN_POSITIVE` are representable.
pub fn ln_gamma_q(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    let ln_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        let p = (ln_prefactor + sum.ln()).exp();
        (-p).ln_1p()
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / CF_TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < CF_TINY {
                d = CF_TINY;
            }
            c = b + an / c;
            if c.abs() < CF_TINY {
                c = CF_TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        ln_prefactor + h.ln()
    }
}

/// `log10 Pr(chi2_dof >= x)`.
pub fn chi_square_log_sf(x: f64, dof: usize) -> f64 {
    assert!(dof >= 1, "chi-square needs dof >= 1");
    if x <= 0.0 {
        return 0.0;
    }
    ln_gamma_q(dof as f64 / 2.0, x / 2.0) / std::f64::consts::LN_10
}

/// K x C table of observed counts `l_kc`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
    row_totals: Vec<u64>,
    col_totals: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || cols == 0 {
            return Err(Error::InvalidInput("contingency table is empty".into()));
        }
        if counts.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("contingency table rows differ in length".into()));
        }
        let row_totals: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_totals: Vec<u64> = (0..cols).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
        let total: u64 = row_totals.iter().sum();
        if total == 0 {
            return Err(Error::InvalidInput("contingency table has no observations".into()));
        }
        Ok(Self {
            counts,
            row_totals,
            col_totals,
            total,
        })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row_totals(&self) -> &[u64] {
        &self.row_totals
    }

    pub fn col_totals(&self) -> &[u64] {
        &self.col_totals
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn cols(&self) -> usize {
        self.col_totals.len()
    }

    /// `e_kc = l_k * n_c / n`.
    pub fn expected_counts(&self) -> Vec<Vec<f64>> {
        let n = self.total as f64;
        self.row_totals
            .iter()
            .map(|&lk| {
                self.col_totals
                    .iter()
                    .map(|&nc| lk as f64 * nc as f64 / n)
                    .collect()
            })
            .collect()
    }

    /// Smallest expected count, with its (row, column).
    pub fn min_expected(&self) -> (usize, usize, f64) {
        let e = self.expected_counts();
        let mut best = (0, 0, f64::INFINITY);
        for (k, row) in e.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v < best.2 {
                    best = (k, c, v);
                }
            }
        }
        best
    }

    /// Adds row `from` into row `into` and removes `from`; later rows shift up.
    pub fn merge_rows(&self, from: usize, into: usize) -> Result<Self> {
        if from == into || from >= self.rows() || into >= self.rows() {
            return Err(Error::InvalidInput(format!(
                "cannot merge row {from} into {into} of a {}-row table",
                self.rows()
            )));
        }
        let mut counts = self.counts.clone();
        let moved = counts[from].clone();
        for (dst, v) in counts[into].iter_mut().zip(moved) {
            *dst += v;
        }
        counts.remove(from);
        Self::from_counts(counts)
    }
}

/// Counts of `(label, condition)` pairs.
pub fn build_contingency(labels: &[usize], conditions: &[usize], k: usize, c: usize) -> Result<ContingencyTable> {
    if labels.len() != conditions.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels but {} conditions",
            labels.len(),
            conditions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("no observations for contingency table".into()));
    }
    let mut counts = vec![vec![0u64; c]; k];
    for (&l, &cond) in labels.iter().zip(conditions) {
        if l >= k || cond >= c {
            return Err(Error::InvalidInput(format!(
                "pair ({l}, {cond}) outside {k}x{c} table"
            )));
        }
        counts[l][cond] += 1;
    }
    ContingencyTable::from_counts(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ChiSquareResult {
    pub chi2: f64,
    pub dof: usize,
    pub log10_p: f64,
    pub significant: bool,
}

/// Pearson chi-square test of independence (no continuity correction).
pub fn chi_square_test(table: &ContingencyTable) -> Result<ChiSquareResult> {
    if table.rows() < 2 || table.cols() < 2 {
        return Err(Error::InvalidInput(format!(
            "chi-square needs at least a 2x2 table, got {}x{}",
            table.rows(),
            table.cols()
        )));
    }
    let expected = table.expected_counts();
    let mut chi2 = 0.0;
    for (k, (obs_row, exp_row)) in table.counts().iter().zip(&expected).enumerate() {
        for (c, (&o, &e)) in obs_row.iter().zip(exp_row).enumerate() {
            if e <= 0.0 {
                return Err(Error::ZeroExpected { row: k, col: c });
            }
            let d = o as f64 - e;
            chi2 += d * d / e;
        }
    }
    let dof = (table.rows() - 1) * (table.cols() - 1);
    let log10_p = chi_square_log_sf(chi2, dof);
    Ok(ChiSquareResult {
        chi2,
        dof,
        log10_p,
        significant: log10_p < ALPHA.log10(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct McNemarResult {
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
    /// Continuity-corrected statistic; `None` when the exact test was used.
    pub statistic: Option<f64>,
    pub p_value: f64,
    pub log10_p: f64,
    pub exact: bool,
    pub significant: bool,
}

/// Discordant-pair count below which the exact binomial test is used.
pub const MCNEMAR_EXACT_BELOW: u64 = 25;

/// McNemar test on paired per-sample correctness of two classifiers.
pub fn mcnemar_test(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemarResult> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::InvalidInput(format!(
            "paired lists differ in length: {} vs {}",
            correct_a.len(),
            correct_b.len()
        )));
    }
    let mut b = 0u64;
    let mut c = 0u64;
    for (&a, &bb) in correct_a.iter().zip(correct_b) {
        match (a, bb) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

pub fn mcnemar_from_counts(b: u64, c: u64) -> McNemarResult {
    let n = b + c;
    let (statistic, log10_p, exact) = if n == 0 {
        (None, 0.0, true)
    } else if n < MCNEMAR_EXACT_BELOW {
        (None, exact_binomial_two_sided_log10(b.min(c), n), true)
    } else {
        let d = (b as f64 - c as f64).abs() - 1.0;
        let stat = d.max(0.0).powi(2) / n as f64;
        (Some(stat), chi_square_log_sf(stat, 1), false)
    };
    let p_value = 10f64.powf(log10_p);
    McNemarResult {
        b,
        c,
        statistic,
        p_value,
        log10_p,
        exact,
        significant: p_value < ALPHA,
    }
}

/// `log10 min(1, 2 * Pr(Bin(n, 1/2) <= k))`.
fn exact_binomial_two_sided_log10(k: u64, n: u64) -> f64 {
    let ln_choose = |i: u64| ln_gamma(n as f64 + 1.0) - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0);
    let half_n = n as f64 * std::f64::consts::LN_2;
    let terms: Vec<f64> = (0..=k).map(|i| ln_choose(i) - half_n).collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ln_tail = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    ((ln_tail + std::f64::consts::LN_2).min(0.0)) / std::f64::consts::LN_10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct MannWhitneyResult {
    /// Rank-sum statistic of the first sample.
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// One-sided Mann-Whitney U test, alternative: `x` is stochastically smaller
/// than `y`. Normal approximation with midranks, tie-corrected variance and
/// continuity correction.
pub fn mann_whitney_u_one_sided(x: &[f64], y: &[f64]) -> Result<MannWhitneyResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidInput("Mann-Whitney needs two non-empty samples".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("Mann-Whitney input contains NaN".into()));
    }
    let n1 = x.len() as f64;
    let n2 = y.len() as f64;
    let mut pooled: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_x = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_x += midrank * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_x - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mean = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)).max(1.0));
    let (z, p_value) = if var <= 0.0 {
        (0.0, 0.5)
    } else {
        let z = (u - mean + 0.5) / var.sqrt();
        (z, 0.5 * erfc(-z / std::f64::consts::SQRT_2))
    };
    Ok(MannWhitneyResult {
        u,
        z,
        p_value,
        significant: p_value < ALPHA,
    })
}
