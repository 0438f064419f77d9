//! Heterogeneous learning: text-state maintenance (DRU), cluster-level and
//! instance-level cross-group matching, and joint training of the image
//! encoder on `L_hc + L_chc + L_ihc + lambda_tgc * L_tgc`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{accumulate, warmup_lr, PoolSampler, SampleTerm};
use crate::clustering::{cluster_groups, ClusterConfig, ClusterKey, ClusterState};
use crate::encoders::ImageEncoder;
use crate::error::{ensure, Error, Result};
use crate::numerics::{axpy, dot, normalize_in_place, softmax_xent_contrastive, Adam, Grads, Mat};
use crate::stage1::centroid_term;
use crate::stage2::OfflineTextBank;
use crate::synthgen::{derive_seed, Group, GroupKey, TrainRecord};

/// How cross-group cluster pairs are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChmMode {
    /// No cluster-level cross-group term.
    Off,
    /// Keep every image-space assignment pair (no text gating).
    AlwaysRetain,
    /// Keep pairs found in both image and text assignments; keep the rest
    /// with probability beta.
    Consistency,
}

/// How instance-level cross-group positives are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceMode {
    Off,
    /// Top-k neighbours in image space only.
    ImageOnly,
    /// Intersection of image-space and text-space top-k neighbours.
    Ihm,
}

/// Component switches reproducing the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub scenario_embedding: bool,
    pub mss: bool,
    pub dru: bool,
    pub chm: ChmMode,
    pub instance: InstanceMode,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::variant(7).expect("full model is variant 7")
    }
}

impl AblationFlags {
    /// Ladder rows 1..=7: 1 is the baseline with always-retain cluster pairs,
    /// each later row adds scenario embedding, scenario separation, DRU,
    /// consistency gating, image-only instance matching, and finally
    /// image-text instance matching (which replaces the image-only variant).
    pub fn variant(n: usize) -> Option<Self> {
        let mut f = Self {
            scenario_embedding: false,
            mss: false,
            dru: false,
            chm: ChmMode::AlwaysRetain,
            instance: InstanceMode::Off,
        };
        if !(1..=7).contains(&n) {
            return None;
        }
        f.scenario_embedding = n >= 2;
        f.mss = n >= 3;
        f.dru = n >= 4;
        if n >= 5 {
            f.chm = ChmMode::Consistency;
        }
        f.instance = match n {
            6 => InstanceMode::ImageOnly,
            7 => InstanceMode::Ihm,
            _ => InstanceMode::Off,
        };
        Some(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage3Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub lambda_tgc: f64,
    /// Temperature of the text-guided term.
    pub tgc_temperature: f64,
    pub lr: f64,
    pub warmup_epochs: usize,
    /// Derived from the run seed at runtime, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            temperature: 0.05,
            eta: 0.8,
            alpha: 0.8,
            beta: 0.5,
            k: 200,
            lambda_tgc: 1.0,
            tgc_temperature: 1.0,
            lr: 3.5e-4,
            warmup_epochs: 10,
            seed: 0,
        }
    }
}

/// Online text representations.
#[derive(Debug, Clone, PartialEq)]
pub struct TextState {
    /// Per training-view record; `None` until the record joins a cluster that
    /// has text.
    pub instance: Vec<Option<Vec<f64>>>,
    pub cluster: BTreeMap<ClusterKey, Vec<f64>>,
}

impl TextState {
    pub fn from_bank(bank: &OfflineTextBank, records: &[TrainRecord]) -> Self {
        Self {
            instance: records.iter().map(|r| bank.instance_reps.get(&r.record_id).cloned()).collect(),
            cluster: bank.cluster_reps.clone(),
        }
    }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        axpy(&mut m, 1.0, r);
        n += 1;
    }
    if n > 0 {
        m.iter_mut().for_each(|x| *x /= n as f64);
    }
    m
}

/// Trimmed cluster text direction: mean of the `ceil(eta * N)` member reps
/// closest to the plain mean (at least one), normalized. `reps` are the
/// members' instance text reps; ties keep the earlier member.
pub fn trimmed_cluster_rep(reps: &[&[f64]], eta: f64) -> Result<Vec<f64>> {
    ensure!(!reps.is_empty(), Contract, "cluster has no text representations");
    let dim = reps[0].len();
    let rough = mean_of(reps.iter().copied(), dim);
    let keep = ((eta * reps.len() as f64).ceil() as usize).clamp(1, reps.len());
    let mut order: Vec<usize> = (0..reps.len()).collect();
    let sims: Vec<f64> = reps.iter().map(|r| dot(r, &rough)).collect();
    order.sort_by(|&i, &j| sims[j].total_cmp(&sims[i]).then(i.cmp(&j)));
    let mut c = mean_of(order[..keep].iter().map(|&i| reps[i]), dim);
    normalize_in_place(&mut c)?;
    Ok(c)
}

/// Dynamic text update for every cluster: recompute the trimmed cluster
/// direction, then pull each member's instance rep toward it at rate `alpha`
/// and renormalize. Members without text adopt the cluster direction.
/// Clusters with no text-bearing member get no text rep. Outliers are untouched.
pub fn dru_update(text: &mut TextState, state: &ClusterState, records: &[TrainRecord], eta: f64, alpha: f64) -> Result<()> {
    text.cluster.clear();
    for (key, g) in &state.groups {
        for (label, members) in g.cluster_members().into_iter().enumerate() {
            ensure!(!members.is_empty(), Contract, "cluster {label} of {key:?} is empty");
            let idx: Vec<usize> = members.iter().map(|&p| g.members[p]).collect();
            let reps: Vec<&[f64]> = idx.iter().filter_map(|&i| text.instance[i].as_deref()).collect();
            if reps.is_empty() {
                continue;
            }
            let c = trimmed_cluster_rep(&reps, eta)?;
            for &i in &idx {
                let updated = match &text.instance[i] {
                    Some(f) if alpha == 0.0 => f.clone(),
                    Some(f) => {
                        let mut v: Vec<f64> = f.iter().zip(&c).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect();
                        normalize_in_place(&mut v).map_err(|_| {
                            Error::Degenerate(format!("text update of record {} cancelled to zero", records[i].record_id))
                        })?;
                        v
                    }
                    None => c.clone(),
                };
                text.instance[i] = Some(updated);
            }
            text.cluster.insert(ClusterKey::new(*key, label), c);
        }
    }
    Ok(())
}

/// Cluster text reps as the normalized plain mean of member instance reps,
/// leaving instance reps as they are (DRU disabled).
pub fn static_cluster_text(text: &mut TextState, state: &ClusterState) {
    text.cluster.clear();
    for (key, g) in &state.groups {
        for (label, members) in g.cluster_members().into_iter().enumerate() {
            let reps: Vec<&[f64]> = members.iter().filter_map(|&p| text.instance[g.members[p]].as_deref()).collect();
            if reps.is_empty() {
                continue;
            }
            let mut c = mean_of(reps.iter().copied(), reps[0].len());
            if normalize_in_place(&mut c).is_ok() {
                text.cluster.insert(ClusterKey::new(*key, label), c);
            }
        }
    }
}

/// Minimum-cost assignment on a rectangular cost matrix, matching
/// `min(rows, cols)` pairs. Returns `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &Mat) -> Vec<(usize, usize)> {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n > m {
        let mut t = Mat::zeros(m, n);
        for i in 0..n {
            for j in 0..m {
                t.set(j, i, cost.get(i, j));
            }
        }
        let mut pairs: Vec<(usize, usize)> = hungarian(&t).into_iter().map(|(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // potentials method, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// Cost of a missing text rep in the text-space assignment.
const MISSING_TEXT_COST: f64 = 2.0;

/// One image-space cluster assignment pair between groups a and b.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChmPair {
    pub scenario: usize,
    pub a: usize,
    pub b: usize,
    /// Whether the text-space assignment agrees; `None` when not gated.
    pub consistent: Option<bool>,
    pub retained: bool,
}

/// Cluster-level matching for every scenario with clusters on both sides.
pub fn chm(state: &ClusterState, text: &TextState, mode: ChmMode, beta: f64, rng: &mut ChaCha8Rng) -> Vec<ChmPair> {
    let mut out = Vec::new();
    if mode == ChmMode::Off {
        return out;
    }
    let scenarios: Vec<usize> = state.groups.keys().map(|k| k.scenario).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for s in scenarios {
        let (ka, kb) = (GroupKey::new(s, Group::A), GroupKey::new(s, Group::B));
        let (Some(ga), Some(gb)) = (state.groups.get(&ka), state.groups.get(&kb)) else { continue };
        let (ca, cb) = (ga.num_clusters(), gb.num_clusters());
        if ca == 0 || cb == 0 {
            log::warn!("scenario {s}: a group has no clusters, cluster matching skipped");
            continue;
        }
        let mut img_cost = Mat::zeros(ca, cb);
        for u in 0..ca {
            for v in 0..cb {
                img_cost.set(u, v, 1.0 - dot(ga.centroids.centroids.row(u), gb.centroids.centroids.row(v)));
            }
        }
        let image_pairs = hungarian(&img_cost);
        let text_pairs = (mode == ChmMode::Consistency).then(|| {
            let mut c = Mat::zeros(ca, cb);
            for u in 0..ca {
                for v in 0..cb {
                    let cost = match (text.cluster.get(&ClusterKey::new(ka, u)), text.cluster.get(&ClusterKey::new(kb, v))) {
                        (Some(x), Some(y)) => 1.0 - dot(x, y),
                        _ => MISSING_TEXT_COST,
                    };
                    c.set(u, v, cost);
                }
            }
            hungarian(&c)
        });
        for (a, b) in image_pairs {
            let consistent = text_pairs.as_ref().map(|tp| tp.binary_search(&(a, b)).is_ok());
            let retained = match consistent {
                None | Some(true) => true,
                Some(false) => rng.random::<f64>() < beta,
            };
            out.push(ChmPair { scenario: s, a, b, consistent, retained });
        }
    }
    out
}

/// Indices of the `k` best candidates by descending score, ties to the lower
/// record id. `cands` holds `(index, record_id, score)`.
fn top_k(mut cands: Vec<(usize, usize, f64)>, k: usize) -> Vec<usize> {
    cands.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.1.cmp(&y.1)));
    let mut out: Vec<usize> = cands.into_iter().take(k).map(|c| c.0).collect();
    out.sort_unstable();
    out
}

/// Instance-level positive sets: for every record, opposite-group records of
/// the same scenario among its top-`k` image neighbours and (for
/// [`InstanceMode::Ihm`]) also among its top-`k` text neighbours. `k` is
/// clamped to the candidate count. Returned sets hold training-view indices,
/// ascending.
pub fn ihm(records: &[TrainRecord], image_reps: &Mat, text: &TextState, k: usize, mode: InstanceMode) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); records.len()];
    if mode == InstanceMode::Off {
        return out;
    }
    let mut by_group: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_group.entry(r.key()).or_default().push(i);
    }
    use rayon::prelude::*;
    out.par_iter_mut().enumerate().for_each(|(x, set)| {
        let Some(opp) = by_group.get(&records[x].key().opposite()) else { return };
        let img: Vec<(usize, usize, f64)> =
            opp.iter().map(|&j| (j, records[j].record_id, dot(image_reps.row(x), image_reps.row(j)))).collect();
        let psi_i = top_k(img, k.max(1));
        *set = match mode {
            InstanceMode::ImageOnly => psi_i,
            _ => {
                let Some(tx) = text.instance[x].as_deref() else { return };
                let txt: Vec<(usize, usize, f64)> = opp
                    .iter()
                    .filter_map(|&j| text.instance[j].as_deref().map(|tj| (j, records[j].record_id, dot(tx, tj))))
                    .collect();
                let psi_t = top_k(txt, k.max(1));
                psi_i.into_iter().filter(|j| psi_t.binary_search(j).is_ok()).collect()
            }
        };
    });
    out
}

/// Cross-group supervision for one epoch.
#[derive(Debug, Clone)]
pub struct PairSets {
    pub chm: Vec<ChmPair>,
    /// Training-view index to opposite-group positives.
    pub ihm: Vec<Vec<usize>>,
    matched: BTreeMap<ClusterKey, usize>,
}

impl PairSets {
    pub fn new(chm: Vec<ChmPair>, ihm: Vec<Vec<usize>>) -> Self {
        let mut matched = BTreeMap::new();
        for p in chm.iter().filter(|p| p.retained) {
            matched.insert(ClusterKey { scenario: p.scenario, group: Group::A, label: p.a }, p.b);
            matched.insert(ClusterKey { scenario: p.scenario, group: Group::B, label: p.b }, p.a);
        }
        Self { chm, ihm, matched }
    }

    pub fn empty(n: usize) -> Self {
        Self::new(Vec::new(), vec![Vec::new(); n])
    }

    /// Opposite-group label matched to `key`, if a retained pair exists.
    pub fn partner(&self, key: &ClusterKey) -> Option<usize> {
        self.matched.get(key).copied()
    }

    pub fn retained(&self) -> usize {
        self.chm.iter().filter(|p| p.retained).count()
    }

    pub fn consistent(&self) -> usize {
        self.chm.iter().filter(|p| p.consistent == Some(true)).count()
    }

    /// JSON-ready view keyed by record ids.
    pub fn to_json(&self, records: &[TrainRecord]) -> serde_json::Value {
        let ihm: BTreeMap<String, Vec<usize>> = self
            .ihm
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, s)| (records[i].record_id.to_string(), s.iter().map(|&j| records[j].record_id).collect()))
            .collect();
        serde_json::json!({ "chm": self.chm, "ihm": ihm })
    }
}

/// Which loss components are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossMask {
    pub hc: bool,
    pub chc: bool,
    pub ihc: bool,
    pub lambda_tgc: f64,
}

impl LossMask {
    pub const ALL: LossMask = LossMask { hc: true, chc: true, ihc: true, lambda_tgc: 1.0 };
}

/// Batch means of each component; `total` is the mean of per-sample
/// `hc + chc + ihc + lambda_tgc * tgc`.
#[derive(Debug, Clone)]
pub struct Stage3Loss {
    pub hc: f64,
    pub chc: f64,
    pub ihc: f64,
    pub tgc: f64,
    pub total: f64,
    pub grads: Grads,
}

/// The joint loss over `batch`. Centroids, opposite-group reps (taken from
/// `state`, i.e. epoch start) and text reps are constants.
#[allow(clippy::too_many_arguments)]
pub fn stage3_loss(
    records: &[TrainRecord],
    batch: &[usize],
    encoder: &ImageEncoder,
    state: &ClusterState,
    text: &TextState,
    pairs: &PairSets,
    mask: LossMask,
    temperature: f64,
    tgc_temperature: f64,
) -> Result<Stage3Loss> {
    // text candidates of each scenario's share of the batch
    let mut tgc_sets: BTreeMap<usize, (Mat, BTreeMap<usize, usize>)> = BTreeMap::new();
    if mask.lambda_tgc != 0.0 {
        let mut rows: BTreeMap<usize, Vec<(usize, &[f64])>> = BTreeMap::new();
        for &i in batch {
            if let Some(t) = text.instance[i].as_deref() {
                rows.entry(records[i].scenario).or_default().push((i, t));
            }
        }
        for (s, list) in rows {
            let m = Mat::from_rows(&list.iter().map(|(_, t)| *t).collect::<Vec<_>>())?;
            let pos = list.iter().enumerate().map(|(row, (i, _))| (*i, row)).collect();
            tgc_sets.insert(s, (m, pos));
        }
    }
    let (sums, grads) = accumulate(encoder, records, batch, 5, |_, idx, rep| {
        let mut grad = vec![0.0; rep.len()];
        let mut comp = [0.0; 4];
        let key = records[idx].key();
        let label = state.record_labels[idx];
        if mask.hc {
            let (l, g) = centroid_term(state, records, idx, rep, temperature)?;
            comp[0] = l;
            axpy(&mut grad, 1.0, &g);
        }
        let opp = state.groups.get(&key.opposite());
        if mask.chc {
            if let (Some(l), Some(og)) = (label, opp) {
                if let Some(v) = pairs.partner(&ClusterKey::new(key, l)) {
                    let t = softmax_xent_contrastive(rep, &og.centroids.centroids, &[v], temperature, false)?;
                    comp[1] = t.loss;
                    axpy(&mut grad, 1.0, &t.anchor);
                }
            }
        }
        if mask.ihc && !pairs.ihm[idx].is_empty() {
            let og = opp.ok_or_else(|| Error::Contract(format!("record {} has positives but no opposite group", records[idx].record_id)))?;
            let positives: Vec<usize> = pairs.ihm[idx]
                .iter()
                .map(|j| og.members.binary_search(j).map_err(|_| Error::Contract(format!("positive {j} is not in the opposite group"))))
                .collect::<Result<_>>()?;
            let t = softmax_xent_contrastive(rep, &og.reps, &positives, temperature, false)?;
            comp[2] = t.loss;
            axpy(&mut grad, 1.0, &t.anchor);
        }
        if mask.lambda_tgc != 0.0 {
            if let Some((cands, rows)) = tgc_sets.get(&records[idx].scenario) {
                if let Some(&row) = rows.get(&idx) {
                    let t = softmax_xent_contrastive(rep, cands, &[row], tgc_temperature, false)?;
                    comp[3] = t.loss;
                    axpy(&mut grad, mask.lambda_tgc, &t.anchor);
                }
            }
        }
        let total = comp[0] + comp[1] + comp[2] + mask.lambda_tgc * comp[3];
        Ok(SampleTerm { components: vec![comp[0], comp[1], comp[2], comp[3], total], grad_rep: grad })
    })?;
    Ok(Stage3Loss { hc: sums[0], chc: sums[1], ihc: sums[2], tgc: sums[3], total: sums[4], grads })
}

/// Cluster- and instance-level cross-group terms only.
pub fn heterogeneous_losses(
    records: &[TrainRecord],
    batch: &[usize],
    encoder: &ImageEncoder,
    state: &ClusterState,
    pairs: &PairSets,
    temperature: f64,
) -> Result<Stage3Loss> {
    let text = TextState { instance: vec![None; records.len()], cluster: BTreeMap::new() };
    let mask = LossMask { hc: false, chc: true, ihc: true, lambda_tgc: 0.0 };
    stage3_loss(records, batch, encoder, state, &text, pairs, mask, temperature, 1.0)
}

/// Image-to-text term against the batch's instance text reps. Every batch
/// record must carry a text rep.
pub fn text_guided_loss(
    records: &[TrainRecord],
    batch: &[usize],
    encoder: &ImageEncoder,
    state: &ClusterState,
    text: &TextState,
    temperature: f64,
) -> Result<Stage3Loss> {
    for &i in batch {
        ensure!(text.instance[i].is_some(), Contract, "record {} has no text representation", records[i].record_id);
    }
    let mask = LossMask { hc: false, chc: false, ihc: false, lambda_tgc: 1.0 };
    stage3_loss(records, batch, encoder, state, text, &PairSets::empty(records.len()), mask, 1.0, temperature)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage3Epoch {
    pub epoch: usize,
    pub hc: f64,
    pub chc: f64,
    pub ihc: f64,
    pub tgc: f64,
    pub total: f64,
    pub retained_pairs: usize,
    pub consistent_pairs: usize,
    /// Mean positive-set size over clustered records.
    pub mean_positive_set: f64,
    pub clusters_per_scenario: Vec<usize>,
    pub outliers: usize,
}

pub struct Stage3Output {
    pub encoder: ImageEncoder,
    pub text: TextState,
    pub history: Vec<Stage3Epoch>,
}

/// Runs the joint heterogeneous training loop. `observer` sees each epoch's
/// summary, its clustering and its pair sets.
#[allow(clippy::too_many_arguments)]
pub fn run_stage3(
    records: &[TrainRecord],
    mut encoder: ImageEncoder,
    bank: &OfflineTextBank,
    cfg: &Stage3Config,
    clustering: ClusterConfig,
    flags: AblationFlags,
    observer: &mut dyn FnMut(&Stage3Epoch, &ClusterState, &PairSets),
) -> Result<Stage3Output> {
    let num_scenarios = encoder.dims().num_scenarios;
    let mut text = TextState::from_bank(bank, records);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut retain_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut adam = Adam::new(encoder.params());
    let mask = LossMask {
        hc: true,
        chc: flags.chm != ChmMode::Off,
        ihc: flags.instance != InstanceMode::Off,
        lambda_tgc: cfg.lambda_tgc,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let reps = encoder.encode_all(records)?;
        let state = cluster_groups(records, &reps, clustering)?;
        if flags.dru {
            dru_update(&mut text, &state, records, cfg.eta, cfg.alpha)?;
        } else {
            static_cluster_text(&mut text, &state);
        }
        let chm_pairs = chm(&state, &text, flags.chm, cfg.beta, &mut retain_rng);
        let ihm_sets = ihm(records, &reps, &text, cfg.k, flags.instance);
        let pairs = PairSets::new(chm_pairs, ihm_sets);

        let mut sampler = PoolSampler::new(state.clustered_pools(), cfg.batch_size / 2, &mut rng);
        let lr = warmup_lr(cfg.lr, epoch, cfg.warmup_epochs);
        let steps = sampler.steps_per_epoch();
        let mut sums = [0.0; 5];
        for _ in 0..steps {
            let batch = sampler.next_batch(&mut rng);
            let l = stage3_loss(records, &batch, &encoder, &state, &text, &pairs, mask, cfg.temperature, cfg.tgc_temperature)?;
            adam.step(encoder.params_mut(), &l.grads, lr)?;
            for (s, v) in sums.iter_mut().zip([l.hc, l.chc, l.ihc, l.tgc, l.total]) {
                *s += v;
            }
        }
        let n = steps as f64;
        let clustered = state.num_clustered();
        let set_total: usize =
            (0..records.len()).filter(|&i| state.record_labels[i].is_some()).map(|i| pairs.ihm[i].len()).sum();
        let report = Stage3Epoch {
            epoch,
            hc: sums[0] / n,
            chc: sums[1] / n,
            ihc: sums[2] / n,
            tgc: sums[3] / n,
            total: sums[4] / n,
            retained_pairs: pairs.retained(),
            consistent_pairs: pairs.consistent(),
            mean_positive_set: if clustered > 0 { set_total as f64 / clustered as f64 } else { 0.0 },
            clusters_per_scenario: state.clusters_per_scenario(num_scenarios),
            outliers: records.len() - clustered,
        };
        log::info!(
            "stage3 epoch {epoch}: L_s3={:.5} hc={:.5} chc={:.5} ihc={:.5} tgc={:.5} pairs={} |U|={:.2}",
            report.total,
            report.hc,
            report.chc,
            report.ihc,
            report.tgc,
            report.retained_pairs,
            report.mean_positive_set
        );
        observer(&report, &state, &pairs);
        history.push(report);
    }
    Ok(Stage3Output { encoder, text, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_rows() {
        let m1 = AblationFlags::variant(1).unwrap();
        assert!(!m1.scenario_embedding && !m1.mss && !m1.dru);
        assert_eq!(m1.chm, ChmMode::AlwaysRetain);
        let m5 = AblationFlags::variant(5).unwrap();
        assert_eq!((m5.chm, m5.instance), (ChmMode::Consistency, InstanceMode::Off));
        assert_eq!(AblationFlags::variant(6).unwrap().instance, InstanceMode::ImageOnly);
        assert_eq!(AblationFlags::default().instance, InstanceMode::Ihm);
        assert!(AblationFlags::variant(0).is_none() && AblationFlags::variant(8).is_none());
    }

    #[test]
    fn hungarian_identity_on_diagonal_costs() {
        let c = Mat::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(hungarian(&c), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn hungarian_rectangular_matches_smaller_side() {
        let c = Mat::from_rows(&[vec![5.0, 1.0, 9.0, 4.0], vec![2.0, 8.0, 3.0, 0.5]]).unwrap();
        assert_eq!(hungarian(&c), vec![(0, 1), (1, 3)]);
        let mut t = Mat::zeros(4, 2);
        for i in 0..2 {
            for j in 0..4 {
                t.set(j, i, c.get(i, j));
            }
        }
        assert_eq!(hungarian(&t), vec![(1, 0), (3, 1)]);
        assert!(hungarian(&Mat::zeros(0, 3)).is_empty());
    }

    #[test]
    fn trimmed_rep_drops_far_member() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let reps: Vec<&[f64]> = vec![&a, &a, &a, &a, &b];
        let c = trimmed_cluster_rep(&reps, 0.8).unwrap();
        assert_eq!(c, vec![1.0, 0.0]);
        let all = trimmed_cluster_rep(&reps, 1.0).unwrap();
        assert!((all[1] / all[0] - 0.25).abs() < 1e-15);
    }
}
