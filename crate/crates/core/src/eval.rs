//! Cross-group retrieval metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{dot, Mat};

/// Gallery positions per query, best first: descending cosine, ties to the
/// lower record id.
pub fn rank(query: &Mat, gallery: &Mat, gallery_ids: &[usize]) -> Result<Vec<Vec<usize>>> {
    ensure!(gallery.rows() > 0, Param, "gallery is empty");
    ensure!(gallery_ids.len() == gallery.rows(), Shape, "{} gallery ids for {} reps", gallery_ids.len(), gallery.rows());
    ensure!(query.cols() == gallery.cols(), Shape, "query dim {} vs gallery dim {}", query.cols(), gallery.cols());
    use rayon::prelude::*;
    Ok((0..query.rows())
        .into_par_iter()
        .map(|q| {
            let sims: Vec<f64> = gallery.iter_rows().map(|g| dot(query.row(q), g)).collect();
            let mut order: Vec<usize> = (0..gallery.rows()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(gallery_ids[a].cmp(&gallery_ids[b])));
            order
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
    /// Queries dropped because the gallery held none of their identity.
    pub excluded_queries: usize,
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// mAP and CMC@1/5/10 from ranked lists and identities.
pub fn map_cmc(ranked: &[Vec<usize>], query_truth: &[usize], gallery_truth: &[usize]) -> Metrics {
    let mut m = Metrics { map: 0.0, rank1: 0.0, rank5: 0.0, rank10: 0.0, num_queries: 0, excluded_queries: 0 };
    for (order, &t) in ranked.iter().zip(query_truth) {
        let relevant: Vec<bool> = order.iter().map(|&g| gallery_truth[g] == t).collect();
        let Some(first) = relevant.iter().position(|&r| r) else {
            m.excluded_queries += 1;
            continue;
        };
        m.num_queries += 1;
        m.map += average_precision(&relevant);
        m.rank1 += f64::from(first < 1);
        m.rank5 += f64::from(first < 5);
        m.rank10 += f64::from(first < 10);
    }
    if m.excluded_queries > 0 {
        log::warn!("{} queries have no relevant gallery record and were excluded", m.excluded_queries);
    }
    if m.num_queries > 0 {
        let n = m.num_queries as f64;
        m.map /= n;
        m.rank1 /= n;
        m.rank5 /= n;
        m.rank10 /= n;
    }
    m
}

/// Encoded records of one side of a retrieval split.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub reps: Mat,
    pub truth: Vec<usize>,
    pub record_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: usize,
    pub kind: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenarios: Vec<ScenarioReport>,
    pub mean_rank1: f64,
    pub mean_map: f64,
}

impl EvalReport {
    pub fn new(scenarios: Vec<ScenarioReport>) -> Self {
        let n = scenarios.len().max(1) as f64;
        let mean_rank1 = scenarios.iter().map(|s| s.metrics.rank1).sum::<f64>() / n;
        let mean_map = scenarios.iter().map(|s| s.metrics.map).sum::<f64>() / n;
        Self { scenarios, mean_rank1, mean_map }
    }
}

/// Ranks `gallery` for every query and scores the result.
pub fn evaluate(query: &EvalSet, gallery: &EvalSet) -> Result<Metrics> {
    let ranked = rank(&query.reps, &gallery.reps, &gallery.record_ids)?;
    Ok(map_cmc(&ranked, &query.truth, &gallery.truth))
}
