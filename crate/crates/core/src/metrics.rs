//! Displacement errors, confusion-matrix agreement scores and relative
//! improvements.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::Point2;
use crate::error::{Error, Result};

/// Added to the reference value in relative metrics.
pub const REL_EPS: f64 = 1e-8;

fn check_paths(actual: &[Vec<Point2>], pred: &[Vec<Point2>]) -> Result<()> {
    if actual.len() != pred.len() {
        return Err(Error::Shape(format!("{} actual vs {} predicted paths", actual.len(), pred.len())));
    }
    for (i, (a, p)) in actual.iter().zip(pred).enumerate() {
        if a.len() != p.len() || a.is_empty() {
            return Err(Error::Shape(format!("path {i}: {} actual vs {} predicted points", a.len(), p.len())));
        }
    }
    if actual.is_empty() {
        return Err(Error::InvalidInput("no paths to compare".into()));
    }
    Ok(())
}

/// Mean Euclidean distance of one path pair.
pub fn path_ade(actual: &[Point2], pred: &[Point2]) -> f64 {
    actual.iter().zip(pred).map(|(a, p)| a.dist(p)).sum::<f64>() / actual.len() as f64
}

/// Distance between the last points of one path pair.
pub fn path_fde(actual: &[Point2], pred: &[Point2]) -> f64 {
    actual[actual.len() - 1].dist(&pred[pred.len() - 1])
}

/// Mean over all paths and points of pointwise Euclidean distance.
pub fn ade(actual: &[Vec<Point2>], pred: &[Vec<Point2>]) -> Result<f64> {
    check_paths(actual, pred)?;
    let (mut s, mut n) = (0.0, 0usize);
    for (a, p) in actual.iter().zip(pred) {
        for (x, y) in a.iter().zip(p) {
            s += x.dist(y);
        }
        n += a.len();
    }
    Ok(s / n as f64)
}

/// Mean over paths of the final-point distance.
pub fn fde(actual: &[Vec<Point2>], pred: &[Vec<Point2>]) -> Result<f64> {
    check_paths(actual, pred)?;
    Ok(actual.iter().zip(pred).map(|(a, p)| path_fde(a, p)).sum::<f64>() / actual.len() as f64)
}

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_labels(actual: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if actual.len() != pred.len() {
            return Err(Error::Shape(format!("{} actual vs {} predicted labels", actual.len(), pred.len())));
        }
        let mut cm = Self::new(k);
        for (&a, &p) in actual.iter().zip(pred) {
            if a >= k || p >= k {
                return Err(Error::InvalidInput(format!("label outside {k} classes")));
            }
            cm.counts[a][p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn actual_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn predicted_totals(&self) -> Vec<u64> {
        (0..self.k()).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Agreement {
    pub acc: f64,
    pub kappa: f64,
    /// Set when kappa's denominator vanished and kappa was reported as 0.
    pub kappa_degenerate: bool,
}

pub fn accuracy_and_kappa(cm: &ConfusionMatrix) -> Result<Agreement> {
    let n = cm.total() as f64;
    if n == 0.0 {
        return Err(Error::InvalidInput("empty confusion matrix".into()));
    }
    let diag = cm.trace() as f64;
    let chance: f64 = cm
        .actual_totals()
        .iter()
        .zip(cm.predicted_totals())
        .map(|(&a, p)| a as f64 * p as f64)
        .sum();
    let denom = n * n - chance;
    let (kappa, kappa_degenerate) = if denom == 0.0 {
        (0.0, true)
    } else {
        ((n * diag - chance) / denom, false)
    };
    Ok(Agreement {
        acc: diag / n,
        kappa,
        kappa_degenerate,
    })
}

/// Whether a larger (`HigherIsBetter`) or smaller value is an improvement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

impl Direction {
    /// The exponent `m` of the sign factor `(-1)^m`.
    pub fn m(self) -> u32 {
        match self {
            Direction::HigherIsBetter => 0,
            Direction::LowerIsBetter => 1,
        }
    }
}

/// Percent improvement of `d` over `d_ref`, positive when `d` is better.
pub fn relative_metric(d: f64, d_ref: f64, dir: Direction) -> f64 {
    let sign = if dir.m() == 0 { 1.0 } else { -1.0 };
    (d - d_ref) * sign / (d_ref + REL_EPS) * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MetricsReport {
    pub ade: f64,
    pub fde: f64,
    pub acc: f64,
    pub kappa: f64,
    pub kappa_degenerate: bool,
    pub n: u64,
    /// Samples per actual class.
    pub class_counts: Vec<u64>,
}

impl MetricsReport {
    pub fn build(cm: &ConfusionMatrix, ade: f64, fde: f64) -> Result<Self> {
        let ag = accuracy_and_kappa(cm)?;
        Ok(Self {
            ade,
            fde,
            acc: ag.acc,
            kappa: ag.kappa,
            kappa_degenerate: ag.kappa_degenerate,
            n: cm.total(),
            class_counts: cm.actual_totals(),
        })
    }
}

/// Relative metrics of a model against a named reference, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RelativeReport {
    pub reference: String,
    pub r_ade: f64,
    pub r_fde: f64,
    pub r_acc: f64,
    pub r_kappa: f64,
}

impl RelativeReport {
    /// ACC and kappa are compared as percentages.
    pub fn compare(model: &MetricsReport, reference: &MetricsReport, name: &str) -> Self {
        Self {
            reference: name.to_string(),
            r_ade: relative_metric(model.ade, reference.ade, Direction::LowerIsBetter),
            r_fde: relative_metric(model.fde, reference.fde, Direction::LowerIsBetter),
            r_acc: relative_metric(100.0 * model.acc, 100.0 * reference.acc, Direction::HigherIsBetter),
            r_kappa: relative_metric(100.0 * model.kappa, 100.0 * reference.kappa, Direction::HigherIsBetter),
        }
    }
}
