//! Destination clustering: seeded Lloyd iterations over trajectory endpoints
//! and merging of clusters that fail the minimum expected count rule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Point2, ResampledTrajectory};
use crate::error::{Error, Result};
use crate::stats::{ContingencyTable, MIN_EXPECTED};

/// Cluster centroids indexed by original cluster id, plus the merge history.
///
/// Labels handed out by [`assign_label`] are compact: label `k` is the k-th
/// surviving original id in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    centroids: Vec<Point2>,
    merge_map: Vec<usize>,
    #[serde(default)]
    empty: Vec<bool>,
}

impl ClusterModel {
    pub fn new(centroids: Vec<Point2>) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(Error::InvalidInput("need at least 2 clusters".into()));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("centroids must be finite".into()));
        }
        let n = centroids.len();
        Ok(Self {
            centroids,
            merge_map: (0..n).collect(),
            empty: vec![false; n],
        })
    }

    /// Rebuilds a model from serialized parts, checking the merge map.
    pub fn from_parts(centroids: Vec<Point2>, merge_map: Vec<usize>) -> Result<Self> {
        let mut m = Self::new(centroids)?;
        if merge_map.len() != m.centroids.len()
            || merge_map.iter().any(|&s| s >= merge_map.len() || merge_map[s] != s)
        {
            return Err(Error::InvalidInput("merge map must be idempotent and in range".into()));
        }
        m.merge_map = merge_map;
        m.validate_k()?;
        Ok(m)
    }

    fn validate_k(&self) -> Result<()> {
        if self.k() < 2 {
            return Err(Error::InvalidInput("model has fewer than 2 surviving clusters".into()));
        }
        Ok(())
    }

    /// Number of surviving clusters.
    pub fn k(&self) -> usize {
        self.merge_map.iter().enumerate().filter(|(i, &s)| *i == s).count()
    }

    pub fn original_k(&self) -> usize {
        self.centroids.len()
    }

    /// Surviving original ids in label order.
    pub fn survivors(&self) -> Vec<usize> {
        (0..self.centroids.len()).filter(|&i| self.merge_map[i] == i).collect()
    }

    /// Centroids of surviving clusters in label order.
    pub fn centroids(&self) -> Vec<Point2> {
        self.survivors().into_iter().map(|i| self.centroids[i]).collect()
    }

    pub fn merge_map(&self) -> &[usize] {
        &self.merge_map
    }

    /// Compact label that an original cluster id now maps to.
    pub fn label_of_original(&self, original: usize) -> usize {
        let s = self.merge_map[original];
        self.survivors().iter().position(|&i| i == s).expect("survivor present")
    }

    /// Clusters left without members by the last k-means fit.
    pub fn empty_flags(&self) -> &[bool] {
        &self.empty
    }

    pub fn to_json(&self) -> String {
        let view = ClusterModelJson {
            k: self.k(),
            centroids: self.centroids.clone(),
            merge_map: self.merge_map.clone(),
            surviving_centroids: self.centroids(),
        };
        serde_json::to_string_pretty(&view).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: ClusterModelJson =
            serde_json::from_str(s).map_err(|e| Error::InvalidInput(format!("cluster model json: {e}")))?;
        let m = Self::from_parts(v.centroids, v.merge_map)?;
        if m.k() != v.k {
            return Err(Error::InvalidInput(format!(
                "cluster model json: k = {} but merge map leaves {}",
                v.k,
                m.k()
            )));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ClusterModelJson {
    k: usize,
    centroids: Vec<Point2>,
    merge_map: Vec<usize>,
    surviving_centroids: Vec<Point2>,
}

/// Nearest surviving centroid by squared distance; ties go to the lowest label.
pub fn assign_label(model: &ClusterModel, p: Point2) -> usize {
    nearest(&model.centroids(), p)
}

fn nearest(centroids: &[Point2], p: Point2) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = c.dist2(&p);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub labels: Vec<usize>,
    /// Objective after each centroid update; the first entry uses the initial
    /// centroids with the first assignment.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn objective(points: &[Point2], labels: &[usize], centroids: &[Point2]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| p.dist2(&centroids[l]))
        .sum()
}

/// Lloyd iterations from user-supplied initial centroids. Stops when no
/// centroid moves by `tol` meters or more, or after `max_iter` updates.
/// A cluster that loses all members keeps its previous centroid and is
/// flagged in [`ClusterModel::empty_flags`].
pub fn kmeans_endpoints(endpoints: &[Point2], init: &[Point2], max_iter: usize, tol: f64) -> Result<KMeansFit> {
    if endpoints.is_empty() {
        return Err(Error::InvalidInput("no endpoints to cluster".into()));
    }
    let mut model = ClusterModel::new(init.to_vec())?;
    for i in 0..init.len() {
        for j in 0..i {
            if init[i] == init[j] {
                return Err(Error::InvalidInput(format!("initial centroids {j} and {i} coincide")));
            }
        }
    }
    let k = init.len();
    let mut centroids = init.to_vec();
    let mut labels: Vec<usize> = endpoints.par_iter().map(|&p| nearest(&centroids, p)).collect();
    let mut trace = vec![objective(endpoints, &labels, &centroids)];
    let mut empty = vec![false; k];
    let mut iterations = 0;
    for _ in 0..max_iter {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (p, &l) in endpoints.iter().zip(&labels) {
            sums[l].0 += p.x;
            sums[l].1 += p.y;
            sums[l].2 += 1;
        }
        let mut shift: f64 = 0.0;
        for (j, &(sx, sy, n)) in sums.iter().enumerate() {
            empty[j] = n == 0;
            if n > 0 {
                let c = Point2::new(sx / n as f64, sy / n as f64);
                shift = shift.max(c.dist(&centroids[j]));
                centroids[j] = c;
            }
        }
        iterations += 1;
        trace.push(objective(endpoints, &labels, &centroids));
        if shift < tol {
            break;
        }
        labels = endpoints.par_iter().map(|&p| nearest(&centroids, p)).collect();
        trace.push(objective(endpoints, &labels, &centroids));
    }
    model.centroids = centroids;
    model.empty = empty;
    Ok(KMeansFit {
        model,
        labels,
        objective_trace: trace,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct MergeEvent {
    /// Original id of the cluster that was absorbed.
    pub from: usize,
    /// Original id of the surviving cluster.
    pub into: usize,
    /// Smallest expected count of the absorbed cluster before merging.
    pub min_expected: f64,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub model: ClusterModel,
    pub table: ContingencyTable,
    pub events: Vec<MergeEvent>,
}

/// Merges the worst undersampled cluster into its nearest surviving centroid
/// until every expected count is at least 5. The merged centroid is the
/// count-weighted mean of the two.
pub fn merge_undersampled(model: &ClusterModel, table: &ContingencyTable) -> Result<MergeOutcome> {
    if table.rows() != model.k() {
        return Err(Error::InvalidInput(format!(
            "table has {} rows but model has {} clusters",
            table.rows(),
            model.k()
        )));
    }
    let mut model = model.clone();
    let mut table = table.clone();
    let mut events = Vec::new();
    loop {
        let expected = table.expected_counts();
        let row_min: Vec<f64> = expected
            .iter()
            .map(|r| r.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        let (worst, worst_e) = row_min
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        if worst_e >= MIN_EXPECTED {
            break;
        }
        if model.k() <= 2 {
            let cells = expected
                .iter()
                .enumerate()
                .flat_map(|(k, r)| r.iter().enumerate().map(move |(c, &v)| (k, c, v)))
                .filter(|&(_, _, v)| v < MIN_EXPECTED)
                .collect();
            return Err(Error::MergeInfeasible { cells });
        }
        let survivors = model.survivors();
        let from = survivors[worst];
        let from_c = model.centroids[from];
        let mut target = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (label, &orig) in survivors.iter().enumerate() {
            if label == worst {
                continue;
            }
            let d = model.centroids[orig].dist2(&from_c);
            if d < best_d {
                best_d = d;
                target = label;
            }
        }
        let into = survivors[target];
        let w_from = table.row_totals()[worst] as f64;
        let w_into = table.row_totals()[target] as f64;
        let into_c = model.centroids[into];
        if w_from + w_into > 0.0 {
            model.centroids[into] = Point2::new(
                (from_c.x * w_from + into_c.x * w_into) / (w_from + w_into),
                (from_c.y * w_from + into_c.y * w_into) / (w_from + w_into),
            );
        }
        for s in model.merge_map.iter_mut() {
            if *s == from {
                *s = into;
            }
        }
        model.empty[into] = model.empty[into] && model.empty[from];
        table = table.merge_rows(worst, target)?;
        events.push(MergeEvent {
            from,
            into,
            min_expected: worst_e,
        });
    }
    Ok(MergeOutcome { model, table, events })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrajectory {
    pub traj: ResampledTrajectory,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub items: Vec<LabeledTrajectory>,
    pub k: usize,
}

impl LabeledDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.k];
        for i in &self.items {
            h[i.label] += 1;
        }
        h
    }
}

/// Labels each trajectory by its final point. With `drop_same_origin_dest`,
/// trajectories whose first point falls in the same cluster are dropped.
pub fn build_labeled_dataset(model: &ClusterModel, rts: &[ResampledTrajectory], drop_same_origin_dest: bool) -> LabeledDataset {
    let centroids = model.centroids();
    let items = rts
        .iter()
        .filter_map(|rt| {
            let label = nearest(&centroids, rt.last());
            if drop_same_origin_dest && nearest(&centroids, rt.first()) == label {
                return None;
            }
            Some(LabeledTrajectory {
                traj: rt.clone(),
                label,
            })
        })
        .collect();
    LabeledDataset {
        items,
        k: centroids.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ConditionCode;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    #[test]
    fn assign_ties_to_lowest() {
        let m = ClusterModel::new(vec![p(0.0, 0.0), p(-1.0, 0.0), p(5.0, 5.0), p(9.0, 9.0), p(1.0, 0.0)]).unwrap();
        assert_eq!(assign_label(&m, p(9.0, 9.0)), 3);
        assert_eq!(assign_label(&m, p(0.0, 0.0)), 0);
        // equidistant between labels 1 and 4
        let m = ClusterModel::new(vec![p(10.0, 10.0), p(-1.0, 0.0), p(5.0, 5.0), p(9.0, 9.0), p(1.0, 0.0)]).unwrap();
        assert_eq!(assign_label(&m, p(0.0, 0.0)), 1);
    }

    #[test]
    fn endpoints_on_init_centroids_do_not_move() {
        let init = vec![p(0.0, 0.0), p(3.0, 4.0), p(-2.0, 7.0)];
        let fit = kmeans_endpoints(&init, &init, 50, 1e-9).unwrap();
        assert_eq!(fit.labels, vec![0, 1, 2]);
        assert_eq!(fit.model.centroids(), init);
        assert_eq!(fit.iterations, 1);
    }

    #[test]
    fn far_init_gives_flagged_empty_cluster() {
        let pts: Vec<Point2> = (0..20).map(|i| p(i as f64 * 0.01, 0.0)).collect();
        let fit = kmeans_endpoints(&pts, &[p(0.0, 0.0), p(500.0, 500.0)], 50, 1e-9).unwrap();
        assert_eq!(fit.model.empty_flags(), &[false, true]);
        assert_eq!(fit.model.centroids()[1], p(500.0, 500.0));
    }

    #[test]
    fn rejects_bad_init() {
        assert!(kmeans_endpoints(&[p(0.0, 0.0)], &[p(0.0, 0.0)], 5, 1e-6).is_err());
        assert!(kmeans_endpoints(&[p(0.0, 0.0)], &[p(0.0, 0.0), p(0.0, 0.0)], 5, 1e-6).is_err());
        assert!(kmeans_endpoints(&[], &[p(0.0, 0.0), p(1.0, 0.0)], 5, 1e-6).is_err());
    }

    #[test]
    fn no_merge_when_rule_holds() {
        let m = ClusterModel::new(vec![p(0.0, 0.0), p(1.0, 0.0)]).unwrap();
        let t = ContingencyTable::from_counts(vec![vec![10, 10], vec![10, 10]]).unwrap();
        let out = merge_undersampled(&m, &t).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.model, m);
    }

    #[test]
    fn infeasible_at_two_clusters() {
        let m = ClusterModel::new(vec![p(0.0, 0.0), p(1.0, 0.0)]).unwrap();
        let t = ContingencyTable::from_counts(vec![vec![1, 1], vec![10, 10]]).unwrap();
        assert!(matches!(merge_undersampled(&m, &t), Err(Error::MergeInfeasible { .. })));
    }

    #[test]
    fn json_round_trip() {
        let m = ClusterModel::new(vec![p(0.0, 0.0), p(1.0, 0.0), p(4.0, 0.0)]).unwrap();
        let t = ContingencyTable::from_counts(vec![vec![1, 1], vec![30, 30], vec![30, 30]]).unwrap();
        let merged = merge_undersampled(&m, &t).unwrap().model;
        let back = ClusterModel::from_json(&merged.to_json()).unwrap();
        assert_eq!(back.merge_map(), merged.merge_map());
        assert_eq!(back.centroids(), merged.centroids());
    }

    #[test]
    fn drop_flag_removes_loops() {
        let m = ClusterModel::new(vec![p(0.0, 0.0), p(10.0, 0.0)]).unwrap();
        let c = ConditionCode { weather: 0, daypart: 0 };
        let loop_traj = ResampledTrajectory {
            ped_id: 0,
            points: vec![p(0.1, 0.0), p(3.0, 0.0), p(0.2, 0.1)],
            condition: c,
        };
        let through = ResampledTrajectory {
            ped_id: 1,
            points: vec![p(0.1, 0.0), p(5.0, 0.0), p(10.0, 0.0)],
            condition: c,
        };
        let ds = build_labeled_dataset(&m, &[loop_traj.clone(), through.clone()], true);
        assert_eq!(ds.items.len(), 1);
        assert_eq!(ds.items[0].label, 1);
        let ds = build_labeled_dataset(&m, &[loop_traj, through], false);
        assert_eq!(ds.labels(), vec![0, 1]);
    }
}
