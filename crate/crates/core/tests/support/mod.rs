//! Fixtures, brute-force oracles and criterion-level measurements shared by
//! the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod fixtures;
pub mod oracles;

use std::time::{Duration, Instant};

use msreid_core::clustering::dbscan;
use msreid_core::eval::{evaluate, EvalSet};
use msreid_core::numerics::{finite_diff_check, normalized};
use msreid_core::stage2::{mss_hinge, stage2_loss};
use msreid_core::stage3::{
    dru_update, hungarian, stage3_loss, text_guided_loss, ChmPair, LossMask, PairSets, TextState,
};
use msreid_core::stage1::homogeneous_loss;
use msreid_core::{Mat, Stage2Config};
use rand::Rng;

use fixtures::{rng, unit_vec, Toy};

pub const GRAD_INSTANCES: u64 = 20;
pub const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

/// Worst finite-difference error of one loss over its instances.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub loss: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn temperature_for(seed: u64) -> f64 {
    [0.05, 0.1, 0.5, 1.0][(seed % 4) as usize]
}

fn encoder_check<F>(toy: &Toy, f: F) -> f64
where
    F: Fn(&msreid_core::ImageEncoder) -> (f64, Vec<f64>),
{
    let base = toy.encoder.params().flat();
    finite_diff_check(
        |x| {
            let mut enc = toy.encoder.clone();
            enc.params_mut().set_flat(x).unwrap();
            f(&enc)
        },
        &base,
        FD_STEP,
    )
}

pub fn grad_homogeneous(seed: u64) -> f64 {
    let toy = Toy::new(seed);
    let tau = temperature_for(seed);
    encoder_check(&toy, |enc| {
        let p = homogeneous_loss(&toy.records, &toy.batch, enc, &toy.state, tau).unwrap();
        (p.loss, p.grads.flat())
    })
}

fn stage3_check(toy: &Toy, text: &TextState, pairs: &PairSets, mask: LossMask, seed: u64) -> f64 {
    let tau = temperature_for(seed);
    let tgc_tau = temperature_for(seed + 1);
    encoder_check(toy, |enc| {
        let l = stage3_loss(&toy.records, &toy.batch, enc, &toy.state, text, pairs, mask, tau, tgc_tau).unwrap();
        (l.total, l.grads.flat())
    })
}

pub fn grad_cluster_heterogeneous(seed: u64) -> f64 {
    let toy = Toy::new(seed);
    let pairs = PairSets::new(toy.identity_pairs(), vec![Vec::new(); toy.records.len()]);
    let mask = LossMask { hc: false, chc: true, ihc: false, lambda_tgc: 0.0 };
    stage3_check(&toy, &toy.empty_text(), &pairs, mask, seed)
}

pub fn grad_instance_heterogeneous(seed: u64) -> f64 {
    let toy = Toy::new(seed);
    let pairs = PairSets::new(Vec::new(), toy.random_positive_sets(seed));
    let mask = LossMask { hc: false, chc: false, ihc: true, lambda_tgc: 0.0 };
    stage3_check(&toy, &toy.empty_text(), &pairs, mask, seed)
}

pub fn grad_text_guided(seed: u64) -> f64 {
    let toy = Toy::new(seed);
    let text = toy.random_text(seed);
    let tau = temperature_for(seed);
    encoder_check(&toy, |enc| {
        let l = text_guided_loss(&toy.records, &toy.batch, enc, &toy.state, &text, tau).unwrap();
        (l.total, l.grads.flat())
    })
}

/// All heterogeneous terms at once, with a random text weight.
pub fn grad_joint(seed: u64) -> f64 {
    let toy = Toy::new(seed);
    let pairs = PairSets::new(toy.identity_pairs(), toy.random_positive_sets(seed));
    let lambda = rng(seed).random_range(0.1..2.0);
    let mask = LossMask { hc: true, chc: true, ihc: true, lambda_tgc: lambda };
    stage3_check(&toy, &toy.random_text(seed), &pairs, mask, seed)
}

/// Prompt-token gradient of the image-text terms plus the separation hinge.
pub fn grad_prompt(seed: u64) -> f64 {
    let toy = Toy::new(seed);
    let mut r = rng(seed ^ 0xabc);
    let cfg = Stage2Config {
        lambda_mss: r.random_range(0.5..2.5),
        kappa: r.random_range(1.0..4.0),
        num_tokens: 3,
        token_dim: 4,
        temperature: temperature_for(seed),
        ..Stage2Config::default()
    };
    let (text_enc, tokens) = toy.text_model(cfg.num_tokens, cfg.token_dim, seed);
    let base = tokens.params().flat();
    finite_diff_check(
        |x| {
            let mut t = tokens.clone();
            t.params_mut().set_flat(x).unwrap();
            let l = stage2_loss(&toy.records, &toy.batch, &toy.reps, &toy.labels, &text_enc, &t, &cfg).unwrap();
            (l.loss, l.grads.flat())
        },
        &base,
        FD_STEP,
    )
}

/// Separation hinge against its scenario means directly.
pub fn grad_mss(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = r.random_range(2..6);
    let dim = r.random_range(2..6);
    let kappa = r.random_range(0.5..3.0);
    let flat: Vec<f64> = (0..s * dim).map(|_| r.random_range(-0.6..0.6)).collect();
    let split = |x: &[f64]| x.chunks(dim).map(<[f64]>::to_vec).collect::<Vec<_>>();
    finite_diff_check(
        |x| {
            let (l, g) = mss_hinge(&split(x), kappa);
            (l, g.concat())
        },
        &flat,
        FD_STEP,
    )
}

pub type GradFn = fn(u64) -> f64;

pub const GRAD_SUITE: [(&str, GradFn); 7] = [
    ("homogeneous", grad_homogeneous),
    ("cluster_heterogeneous", grad_cluster_heterogeneous),
    ("instance_heterogeneous", grad_instance_heterogeneous),
    ("text_guided", grad_text_guided),
    ("joint", grad_joint),
    ("prompt_tokens", grad_prompt),
    ("scenario_separation", grad_mss),
];

pub fn gradient_suite() -> (Vec<GradResult>, Duration) {
    let start = Instant::now();
    let results = GRAD_SUITE
        .iter()
        .map(|&(loss, f)| {
            let worst = (0..GRAD_INSTANCES).map(|s| f(1000 + s)).fold(0.0, f64::max);
            GradResult { loss, instances: GRAD_INSTANCES as usize, worst }
        })
        .collect();
    (results, start.elapsed())
}

/// DBSCAN on clustered random unit vectors versus the component-based
/// reference. Returns the seeds that disagree.
pub fn dbscan_mismatches(instances: u64) -> Vec<u64> {
    (0..instances)
        .filter(|&seed| {
            let (reps, eps, min_samples) = fixtures::blob_instance(seed);
            let got = oracles::canonical(&dbscan(&reps, eps, min_samples));
            let want = oracles::canonical(&oracles::dbscan_reference(&reps, eps, min_samples));
            got != want
        })
        .collect()
}

/// Hungarian versus enumeration on every shape up to `max_side` per side,
/// `per_shape` random instances each. Returns `(instances, mismatches)`.
pub fn hungarian_mismatches(max_side: usize, per_shape: u64) -> (usize, Vec<String>) {
    let mut bad = Vec::new();
    let mut count = 0;
    for n in 1..=max_side {
        for m in 1..=max_side {
            for s in 0..per_shape {
                let seed = (n * 100 + m) as u64 * 1000 + s;
                let cost = fixtures::random_cost(n, m, seed);
                count += 1;
                let got = hungarian(&cost);
                let got_cost: f64 = got.iter().map(|&(i, j)| cost.get(i, j)).sum();
                let (best_cost, best) = oracles::assignment_by_enumeration(&cost);
                if (got_cost - best_cost).abs() > 1e-12 || got != best {
                    bad.push(format!("{n}x{m} seed {seed}: {got:?} ({got_cost}) vs {best:?} ({best_cost})"));
                }
            }
        }
    }
    (count, bad)
}

/// Largest difference between library and brute-force mAP/CMC over random
/// retrieval problems, ties included.
pub fn metric_max_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let (query, gallery) = fixtures::retrieval_instance(seed);
        let got = evaluate(&query, &gallery).unwrap();
        let want = oracles::metrics_reference(&query, &gallery);
        for (a, b) in [(got.map, want.map), (got.rank1, want.rank1), (got.rank5, want.rank5), (got.rank10, want.rank10)] {
            worst = worst.max((a - b).abs());
        }
        if got.num_queries != want.num_queries {
            worst = f64::INFINITY;
        }
    }
    worst
}

/// Measurements of the text-update algebra on random clusterings.
#[derive(Debug, Clone, Copy)]
pub struct DruAlgebra {
    /// Largest `1 - cos` between two members of a cluster after a full update.
    pub collapse_gap: f64,
    /// Whether a zero rate left every instance rep bit-identical.
    pub zero_rate_identity: bool,
    /// Whether perturbing a non-member left every other cluster rep
    /// bit-identical.
    pub locality: bool,
}

pub fn dru_algebra(instances: u64) -> DruAlgebra {
    let mut out = DruAlgebra { collapse_gap: 0.0, zero_rate_identity: true, locality: true };
    for seed in 0..instances {
        let toy = Toy::new(seed);
        let base = toy.random_text(seed);

        let mut full = base.clone();
        dru_update(&mut full, &toy.state, &toy.records, 1.0, 1.0).unwrap();
        for cluster in toy.clusters() {
            for &i in &cluster {
                for &j in &cluster {
                    let (a, b) = (full.instance[i].as_ref().unwrap(), full.instance[j].as_ref().unwrap());
                    let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    out.collapse_gap = out.collapse_gap.max((1.0 - cos).abs());
                }
            }
        }

        let mut still = base.clone();
        dru_update(&mut still, &toy.state, &toy.records, 0.8, 0.0).unwrap();
        out.zero_rate_identity &= still.instance == base.instance;

        let mut reference = base.clone();
        dru_update(&mut reference, &toy.state, &toy.records, 0.8, 0.8).unwrap();
        let clusters = toy.cluster_keys();
        let target = clusters[seed as usize % clusters.len()];
        let outsider = (0..toy.records.len())
            .find(|&i| toy.state.key_of(&toy.records, i) != Some(target))
            .expect("toy has several clusters");
        let mut perturbed = base.clone();
        let mut r = rng(seed ^ 0x77);
        perturbed.instance[outsider] = Some(unit_vec(&mut r, toy.output_dim()));
        dru_update(&mut perturbed, &toy.state, &toy.records, 0.8, 0.8).unwrap();
        out.locality &= perturbed.cluster[&target].iter().zip(&reference.cluster[&target]).all(|(a, b)| a.to_bits() == b.to_bits());
        let members = toy.members_of(target);
        out.locality &= members.iter().all(|&i| perturbed.instance[i] == reference.instance[i]);
    }
    out
}

/// Worst `|reported total - weighted component sum|` of the joint loss over
/// random instances.
pub fn additivity_gap(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let toy = Toy::new(seed);
        let pairs = PairSets::new(toy.identity_pairs(), toy.random_positive_sets(seed));
        let lambda = rng(seed).random_range(0.0..3.0);
        let mask = LossMask { hc: true, chc: true, ihc: true, lambda_tgc: lambda };
        let text = toy.random_text(seed);
        let l = stage3_loss(&toy.records, &toy.batch, &toy.encoder, &toy.state, &text, &pairs, mask, 0.05, 0.1).unwrap();
        worst = worst.max((l.total - (l.hc + l.chc + l.ihc + lambda * l.tgc)).abs());
    }
    worst
}

/// `L_mss` when every scenario shares one mean, for `s` scenarios.
pub fn mss_identical_means(s: usize, kappa: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mean = unit_vec(&mut r, 6);
    mss_hinge(&vec![mean; s], kappa).0
}

/// Builds a retained pair list matching cluster `u` of group A to cluster `u`
/// of group B in every scenario.
pub fn diagonal_pairs(scenarios: usize, clusters: usize) -> Vec<ChmPair> {
    (0..scenarios)
        .flat_map(|s| (0..clusters).map(move |u| ChmPair { scenario: s, a: u, b: u, consistent: None, retained: true }))
        .collect()
}

pub fn unit_rows(rows: &[Vec<f64>]) -> Mat {
    Mat::from_rows(&rows.iter().map(|r| normalized(r).unwrap()).collect::<Vec<_>>()).unwrap()
}

pub fn eval_set(reps: Mat, truth: Vec<usize>) -> EvalSet {
    let record_ids = (0..reps.rows()).collect();
    EvalSet { reps, truth, record_ids }
}
