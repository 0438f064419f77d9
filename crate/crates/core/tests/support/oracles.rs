use std::collections::BTreeMap;

use msreid_core::eval::EvalSet;
use msreid_core::{Label, Mat};

/// Relabels clusters in order of first appearance.
pub fn canonical(labels: &[Label]) -> Vec<Label> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            l.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
        })
        .collect()
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut root = x;
    while parent[root] != root {
        root = parent[root];
    }
    parent[x] = root;
    root
}

/// DBSCAN from its definition: clusters are connected components of the
/// core-point graph; a border point joins the adjacent component whose
/// smallest core index is lowest; everything else is noise.
pub fn dbscan_reference(reps: &Mat, eps: f64, min_samples: usize) -> Vec<Label> {
    let n = reps.rows();
    let adj: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut d = 0.0;
                    for k in 0..reps.cols() {
                        d += reps.get(i, k) * reps.get(j, k);
                    }
                    1.0 - d <= eps
                })
                .collect()
        })
        .collect();
    let core: Vec<bool> = adj.iter().map(|row| row.iter().filter(|&&b| b).count() >= min_samples).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && adj[i][j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // each root's smallest member index
    let mut first_core: BTreeMap<usize, usize> = BTreeMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let root = find(&mut parent, i);
        first_core.entry(root).or_insert(i);
    }
    let mut order: Vec<(usize, usize)> = first_core.iter().map(|(&root, &first)| (first, root)).collect();
    order.sort_unstable();
    let rank: BTreeMap<usize, usize> = order.iter().enumerate().map(|(r, &(_, root))| (root, r)).collect();
    (0..n)
        .map(|i| {
            if core[i] {
                Some(rank[&find(&mut parent, i)])
            } else {
                (0..n).filter(|&j| core[j] && adj[i][j]).map(|j| rank[&find(&mut parent, j)]).min()
            }
        })
        .collect()
}

fn injections(slots: usize, targets: usize, used: &mut Vec<bool>, current: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if current.len() == slots {
        visit(current);
        return;
    }
    for t in 0..targets {
        if !used[t] {
            used[t] = true;
            current.push(t);
            injections(slots, targets, used, current, visit);
            current.pop();
            used[t] = false;
        }
    }
}

/// Minimum-cost assignment by trying every injection of the shorter side
/// into the longer one. Pairs are `(row, col)` sorted by row; the cost is
/// summed in row order.
pub fn assignment_by_enumeration(cost: &Mat) -> (f64, Vec<(usize, usize)>) {
    let (n, m) = (cost.rows(), cost.cols());
    let transpose = n > m;
    let (slots, targets) = if transpose { (m, n) } else { (n, m) };
    let mut best = (f64::INFINITY, Vec::new());
    injections(slots, targets, &mut vec![false; targets], &mut Vec::new(), &mut |map| {
        let mut pairs: Vec<(usize, usize)> =
            map.iter().enumerate().map(|(s, &t)| if transpose { (t, s) } else { (s, t) }).collect();
        pairs.sort_unstable();
        let c: f64 = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
        if c < best.0 {
            best = (c, pairs);
        }
    });
    best
}

#[derive(Debug, Clone, Copy)]
pub struct ReferenceMetrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
}

/// mAP and CMC by counting, for every relevant gallery item, how many items
/// outrank it (higher cosine, or equal cosine and lower record id).
pub fn metrics_reference(query: &EvalSet, gallery: &EvalSet) -> ReferenceMetrics {
    let cos = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let mut out = ReferenceMetrics { map: 0.0, rank1: 0.0, rank5: 0.0, rank10: 0.0, num_queries: 0 };
    for q in 0..query.reps.rows() {
        let sims: Vec<f64> = (0..gallery.reps.rows()).map(|g| cos(query.reps.row(q), gallery.reps.row(g))).collect();
        let position = |g: usize| {
            (0..sims.len())
                .filter(|&h| sims[h] > sims[g] || (sims[h] == sims[g] && gallery.record_ids[h] < gallery.record_ids[g]))
                .count()
        };
        let mut positions: Vec<usize> =
            (0..sims.len()).filter(|&g| gallery.truth[g] == query.truth[q]).map(position).collect();
        if positions.is_empty() {
            continue;
        }
        positions.sort_unstable();
        out.num_queries += 1;
        let ap: f64 = positions.iter().enumerate().map(|(k, &p)| (k + 1) as f64 / (p + 1) as f64).sum::<f64>() / positions.len() as f64;
        out.map += ap;
        out.rank1 += f64::from(positions[0] < 1);
        out.rank5 += f64::from(positions[0] < 5);
        out.rank10 += f64::from(positions[0] < 10);
    }
    if out.num_queries > 0 {
        let n = out.num_queries as f64;
        out.map /= n;
        out.rank1 /= n;
        out.rank5 /= n;
        out.rank10 /= n;
    }
    out
}

/// Top-`k` by full sort, ties to the lower record id; returned ascending.
pub fn top_k_by_sort(scores: &[(usize, usize, f64)], k: usize) -> Vec<usize> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = v.iter().take(k).map(|x| x.0).collect();
    out.sort_unstable();
    out
}
