//! Pseudo-labelling within homogeneous groups.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{axpy, dot, normalize_in_place, Mat};
use crate::encoders::ImageEncoder;
use crate::synthgen::{derive_seed, Group, GroupKey, ImageRecord, ScenarioSpec, TrainRecord};

/// DBSCAN parameters shared by every clustering pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_samples: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { eps: 0.6, min_samples: 4 }
    }
}

/// Pseudo-label of one record; `None` marks a DBSCAN outlier.
pub type Label = Option<usize>;

/// A pseudo-label qualified by the group it lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterKey {
    pub scenario: usize,
    pub group: Group,
    pub label: usize,
}

impl ClusterKey {
    pub fn new(key: GroupKey, label: usize) -> Self {
        Self { scenario: key.scenario, group: key.group, label }
    }

    pub fn group_key(&self) -> GroupKey {
        GroupKey::new(self.scenario, self.group)
    }
}

impl fmt::Display for ClusterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}/{}/{}", self.scenario, self.group, self.label)
    }
}

/// DBSCAN over unit vectors with distance `1 - cosine`.
///
/// A point is core when at least `min_samples` points (itself included) lie
/// within `eps`, inclusive. Clusters are numbered in the order their first
/// core point appears in the input; a border point reachable from several
/// clusters joins the one expanded first.
pub fn dbscan(reps: &Mat, eps: f64, min_samples: usize) -> Vec<Label> {
    let n = reps.rows();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| 1.0 - dot(reps.row(i), reps.row(j)) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();
    let mut labels: Vec<Label> = vec![None; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        let c = next;
        next += 1;
        labels[start] = Some(c);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(c);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    labels
}

/// Two-way split of a scenario's records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Division {
    pub groups: Vec<Group>,
    pub centers: [Vec<f64>; 2],
    /// Set when one side ended up empty (e.g. all inputs identical).
    pub degenerate: bool,
}

impl Division {
    /// Nearest-center group for a new representation; ties go to group a.
    pub fn assign(&self, rep: &[f64]) -> Group {
        if dot(rep, &self.centers[1]) > dot(rep, &self.centers[0]) {
            Group::B
        } else {
            Group::A
        }
    }
}

/// Cosine 2-means with seeded farthest-point initialization.
///
/// Lloyd iterations run until the assignment stops changing or 100 rounds.
/// Cluster 0 becomes group a. Ties go to cluster 0, so identical inputs all
/// land in group a and the result is flagged degenerate.
pub fn kmeans2_division(reps: &Mat, seed: u64) -> Result<Division> {
    let n = reps.rows();
    ensure!(n >= 2, Param, "group division needs at least 2 records, got {n}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut second = 0;
    let mut lowest = f64::INFINITY;
    for j in 0..n {
        let s = dot(reps.row(first), reps.row(j));
        if s < lowest {
            lowest = s;
            second = j;
        }
    }
    let mut centers = [reps.row(first).to_vec(), reps.row(second).to_vec()];
    let mut assign: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..100 {
        let next: Vec<usize> = reps
            .iter_rows()
            .map(|r| usize::from(dot(r, &centers[1]) > dot(r, &centers[0])))
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let mut mean = vec![0.0; reps.cols()];
            let mut count = 0;
            for (i, r) in reps.iter_rows().enumerate() {
                if assign[i] == c {
                    axpy(&mut mean, 1.0, r);
                    count += 1;
                }
            }
            if count > 0 && normalize_in_place(&mut mean).is_ok() {
                *center = mean;
            }
        }
    }
    let degenerate = assign.iter().all(|&a| a == assign[0]);
    if degenerate {
        log::warn!("2-means division is degenerate: all {n} records fell on one side");
    }
    let groups = assign.into_iter().map(|a| if a == 0 { Group::A } else { Group::B }).collect();
    Ok(Division { groups, centers, degenerate })
}

/// Builds the label-free training view. Scenarios whose groups are not
/// observed get a 2-means split of `encoder` representations (front-end a);
/// the others keep their recorded group. Returns the view and the fitted
/// divisions by scenario.
pub fn divide_groups(
    records: &[&ImageRecord],
    specs: &[ScenarioSpec],
    encoder: &ImageEncoder,
    seed: u64,
) -> Result<(Vec<TrainRecord>, BTreeMap<usize, Division>)> {
    let mut view: Vec<TrainRecord> = records
        .iter()
        .map(|r| TrainRecord { record_id: r.record_id, scenario: r.scenario_id, group: r.group, raw: r.raw.clone() })
        .collect();
    let mut divisions = BTreeMap::new();
    for spec in specs.iter().filter(|s| !s.kind.has_observed_groups()) {
        let idx: Vec<usize> = (0..view.len()).filter(|&i| view[i].scenario == spec.scenario_id).collect();
        let reps: Vec<Vec<f64>> = idx.iter().map(|&i| encoder.encode(&view[i].raw, spec.scenario_id, Group::A)).collect::<Result<_>>()?;
        let division = kmeans2_division(&Mat::from_rows(&reps)?, derive_seed(seed, spec.scenario_id as u64))?;
        for (&i, g) in idx.iter().zip(&division.groups) {
            view[i].group = *g;
        }
        divisions.insert(spec.scenario_id, division);
    }
    Ok((view, divisions))
}

/// Unit-normalized cluster means plus the raw means they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// `C x D`, unit rows.
    pub centroids: Mat,
    /// `C x D`, plain arithmetic means.
    pub raw_means: Mat,
    /// Norm of each raw mean; `raw_means[u] = centroids[u] * scales[u]`.
    pub scales: Vec<f64>,
    pub sizes: Vec<usize>,
}

/// Per-cluster mean of member representations, renormalized. Outliers are
/// ignored; cluster ids must be contiguous from 0.
pub fn centroids(reps: &Mat, labels: &[Label]) -> Result<Centroids> {
    ensure!(reps.rows() == labels.len(), Shape, "{} reps but {} labels", reps.rows(), labels.len());
    let count = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let d = reps.cols();
    let mut raw = Mat::zeros(count, d);
    let mut sizes = vec![0usize; count];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            axpy(raw.row_mut(c), 1.0, reps.row(i));
            sizes[c] += 1;
        }
    }
    let mut cents = Mat::zeros(count, d);
    let mut scales = Vec::with_capacity(count);
    for c in 0..count {
        ensure!(sizes[c] > 0, Contract, "cluster id {c} has no members");
        let inv = 1.0 / sizes[c] as f64;
        raw.row_mut(c).iter_mut().for_each(|x| *x *= inv);
        let mut u = raw.row(c).to_vec();
        let s = normalize_in_place(&mut u).map_err(|_| Error::Degenerate(format!("cluster {c} has a zero mean representation")))?;
        cents.row_mut(c).copy_from_slice(&u);
        scales.push(s);
    }
    Ok(Centroids { centroids: cents, raw_means: raw, scales, sizes })
}

/// Pairwise F-score of a pseudo partition against ground truth. Outliers
/// count as singletons. Fewer than two records gives 1.0; no predicted pairs
/// against some true pairs gives 0.0.
pub fn pairwise_fscore<P, T>(pseudo: &[Option<P>], truth: &[T]) -> f64
where
    P: Hash + Eq,
    T: Hash + Eq,
{
    assert_eq!(pseudo.len(), truth.len(), "pseudo and truth cover different record sets");
    if pseudo.len() < 2 {
        return 1.0;
    }
    let pairs = |n: u64| n * n.saturating_sub(1) / 2;
    let mut by_pred: HashMap<&P, u64> = HashMap::new();
    let mut by_true: HashMap<&T, u64> = HashMap::new();
    let mut joint: HashMap<(&P, &T), u64> = HashMap::new();
    for (p, t) in pseudo.iter().zip(truth) {
        *by_true.entry(t).or_default() += 1;
        if let Some(p) = p {
            *by_pred.entry(p).or_default() += 1;
            *joint.entry((p, t)).or_default() += 1;
        }
    }
    let predicted: u64 = by_pred.values().map(|&n| pairs(n)).sum();
    let actual: u64 = by_true.values().map(|&n| pairs(n)).sum();
    let hits: u64 = joint.values().map(|&n| pairs(n)).sum();
    if predicted == 0 && actual == 0 {
        return 1.0;
    }
    if predicted == 0 || actual == 0 || hits == 0 {
        return 0.0;
    }
    let p = hits as f64 / predicted as f64;
    let r = hits as f64 / actual as f64;
    2.0 * p * r / (p + r)
}

/// Clustering result of one homogeneous group.
#[derive(Debug, Clone)]
pub struct GroupClusters {
    /// Indices of the group's records in the training view, ascending.
    pub members: Vec<usize>,
    /// Label of each member, aligned with `members`.
    pub labels: Vec<Label>,
    /// Current image representation of each member, aligned with `members`.
    pub reps: Mat,
    pub centroids: Centroids,
}

impl GroupClusters {
    pub fn num_clusters(&self) -> usize {
        self.centroids.sizes.len()
    }

    /// Member positions (into `members`) per cluster.
    pub fn cluster_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters()];
        for (pos, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(pos);
            }
        }
        out
    }

    pub fn num_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

/// Per-(scenario, group) pseudo-labels and centroids for one epoch.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub groups: BTreeMap<GroupKey, GroupClusters>,
    /// Label of every record in the training view.
    pub record_labels: Vec<Label>,
    /// Position of every record inside its group's `members`.
    pub record_pos: Vec<usize>,
}

impl ClusterState {
    pub fn key_of(&self, records: &[TrainRecord], idx: usize) -> Option<ClusterKey> {
        self.record_labels[idx].map(|l| ClusterKey::new(records[idx].key(), l))
    }

    /// Training-view indices of clustered records, one list per group in
    /// key order.
    pub fn clustered_pools(&self) -> Vec<Vec<usize>> {
        self.groups
            .values()
            .map(|g| g.members.iter().zip(&g.labels).filter(|(_, l)| l.is_some()).map(|(m, _)| *m).collect())
            .collect()
    }

    pub fn num_clustered(&self) -> usize {
        self.record_labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn cluster_keys(&self) -> Vec<ClusterKey> {
        self.groups
            .iter()
            .flat_map(|(k, g)| (0..g.num_clusters()).map(move |l| ClusterKey::new(*k, l)))
            .collect()
    }

    /// Cluster count per scenario, summed over both groups.
    pub fn clusters_per_scenario(&self, num_scenarios: usize) -> Vec<usize> {
        let mut out = vec![0; num_scenarios];
        for (k, g) in &self.groups {
            out[k.scenario] += g.num_clusters();
        }
        out
    }
}

/// Writes `record_id,scenario,group,pseudo_label` rows, `-1` for outliers.
pub fn write_labels_csv(path: &std::path::Path, records: &[TrainRecord], labels: &[Label]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["record_id", "scenario", "group", "pseudo_label"])?;
    for (r, l) in records.iter().zip(labels) {
        let label = l.map_or_else(|| "-1".to_string(), |v| v.to_string());
        w.write_record([r.record_id.to_string(), r.scenario.to_string(), r.group.to_string(), label])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs DBSCAN inside every homogeneous group and computes centroids.
/// Fails when no record in any group joins a cluster.
pub fn cluster_groups(records: &[TrainRecord], reps: &Mat, cfg: ClusterConfig) -> Result<ClusterState> {
    build_state(records, reps, |sub, _| Ok(dbscan(sub, cfg.eps, cfg.min_samples)))
}

/// Rebuilds a state from stored per-record labels and fresh representations.
pub fn state_from_labels(records: &[TrainRecord], reps: &Mat, labels: &[Label]) -> Result<ClusterState> {
    ensure!(labels.len() == records.len(), Shape, "{} labels for {} records", labels.len(), records.len());
    build_state(records, reps, |_, members| Ok(members.iter().map(|&m| labels[m]).collect()))
}

fn build_state<F>(records: &[TrainRecord], reps: &Mat, label_group: F) -> Result<ClusterState>
where
    F: Fn(&Mat, &[usize]) -> Result<Vec<Label>> + Sync,
{
    use rayon::prelude::*;
    ensure!(records.len() == reps.rows(), Shape, "{} records but {} reps", records.len(), reps.rows());
    let mut by_group: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_group.entry(r.key()).or_default().push(i);
    }
    let clustered: Vec<(GroupKey, GroupClusters)> = by_group
        .into_par_iter()
        .map(|(key, members)| {
            let sub = reps.select_rows(&members);
            let labels = label_group(&sub, &members)?;
            let cents = centroids(&sub, &labels)?;
            Ok((key, GroupClusters { members, labels, reps: sub, centroids: cents }))
        })
        .collect::<Result<_>>()?;
    let mut record_labels = vec![None; records.len()];
    let mut record_pos = vec![0; records.len()];
    for (_, g) in &clustered {
        for (pos, (&m, l)) in g.members.iter().zip(&g.labels).enumerate() {
            record_labels[m] = *l;
            record_pos[m] = pos;
        }
    }
    let state = ClusterState { groups: clustered.into_iter().collect(), record_labels, record_pos };
    if state.num_clustered() == 0 {
        return Err(Error::AllOutliers(format!("all {} groups", state.groups.len())));
    }
    Ok(state)
}

/// Reads labels written by [`write_labels_csv`], aligned with `records`.
pub fn read_labels_csv(path: &std::path::Path, records: &[TrainRecord]) -> Result<Vec<Label>> {
    let mut by_id = HashMap::new();
    let mut rdr = csv::Reader::from_path(path)?;
    for row in rdr.records() {
        let row = row?;
        let parse = |i: usize| -> Result<i64> {
            row.get(i)
                .unwrap_or("")
                .parse::<i64>()
                .map_err(|e| Error::Decode(format!("{}: column {i}: {e}", path.display())))
        };
        let id = parse(0)?;
        let label = parse(3)?;
        by_id.insert(id as usize, usize::try_from(label).ok());
    }
    records
        .iter()
        .map(|r| by_id.get(&r.record_id).copied().ok_or_else(|| Error::Decode(format!("no label for record {}", r.record_id))))
        .collect()
}
