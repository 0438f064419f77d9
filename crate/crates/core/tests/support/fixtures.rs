use std::collections::BTreeSet;

use msreid_core::clustering::state_from_labels;
use msreid_core::eval::EvalSet;
use msreid_core::{
    ClusterKey, ClusterState, Group, ImageEncoder, ImageEncoderDims, Label, Mat, PromptTokens, TextEncoder, TextState,
    TrainRecord,
};
use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, r)).collect()
}

pub fn unit_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian(r, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub const TOY_CLUSTERS: usize = 3;

/// A small clustered training set with an encoder and a frozen clustering.
/// Every group holds `TOY_CLUSTERS` clusters and one outlier.
pub struct Toy {
    pub records: Vec<TrainRecord>,
    pub encoder: ImageEncoder,
    pub reps: Mat,
    pub labels: Vec<Label>,
    pub state: ClusterState,
    /// Every clustered record.
    pub batch: Vec<usize>,
    pub scenarios: usize,
}

impl Toy {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let scenarios = 2 + (seed % 2) as usize;
        let per_group = 5 + (seed % 3) as usize;
        let input_dim = 6;
        let mut records = Vec::new();
        let mut labels = Vec::new();
        for s in 0..scenarios {
            for group in [Group::A, Group::B] {
                for p in 0..per_group {
                    records.push(TrainRecord { record_id: 7 * records.len() + 3, scenario: s, group, raw: gaussian(&mut r, input_dim) });
                    labels.push((p + 1 < per_group).then_some(p % TOY_CLUSTERS));
                }
            }
        }
        let dims = ImageEncoderDims { input_dim, hidden_dim: 5, output_dim: 4, num_scenarios: scenarios };
        let encoder = ImageEncoder::init(dims, seed, seed & 1 == 0).unwrap();
        let reps = encoder.encode_all(&records).unwrap();
        let state = state_from_labels(&records, &reps, &labels).unwrap();
        let batch = (0..records.len()).filter(|&i| labels[i].is_some()).collect();
        Self { records, encoder, reps, labels, state, batch, scenarios }
    }

    pub fn output_dim(&self) -> usize {
        self.encoder.dims().output_dim
    }

    pub fn identity_pairs(&self) -> Vec<msreid_core::stage3::ChmPair> {
        super::diagonal_pairs(self.scenarios, TOY_CLUSTERS)
    }

    /// Random non-empty opposite-group positive sets for clustered records.
    pub fn random_positive_sets(&self, seed: u64) -> Vec<Vec<usize>> {
        let mut r = rng(seed ^ 0x5eed);
        (0..self.records.len())
            .map(|i| {
                if self.labels[i].is_none() {
                    return Vec::new();
                }
                let opp = self.records[i].key().opposite();
                let cands: Vec<usize> = (0..self.records.len()).filter(|&j| self.records[j].key() == opp).collect();
                let k = r.random_range(1..=cands.len());
                let mut set: Vec<usize> = cands.into_iter().choose_multiple(&mut r, k);
                set.sort_unstable();
                set
            })
            .collect()
    }

    pub fn empty_text(&self) -> TextState {
        TextState { instance: vec![None; self.records.len()], cluster: Default::default() }
    }

    pub fn random_text(&self, seed: u64) -> TextState {
        let mut r = rng(seed ^ 0x7e47);
        let dim = self.output_dim();
        TextState { instance: (0..self.records.len()).map(|_| Some(unit_vec(&mut r, dim))).collect(), cluster: Default::default() }
    }

    pub fn text_model(&self, num_tokens: usize, token_dim: usize, seed: u64) -> (TextEncoder, PromptTokens) {
        let enc = TextEncoder::init(num_tokens, token_dim, self.output_dim(), seed).unwrap();
        let tokens = PromptTokens::init(self.state.cluster_keys(), num_tokens, token_dim, seed + 1).unwrap();
        (enc, tokens)
    }

    pub fn cluster_keys(&self) -> Vec<ClusterKey> {
        self.state.cluster_keys()
    }

    pub fn members_of(&self, key: ClusterKey) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.state.key_of(&self.records, i) == Some(key)).collect()
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        self.cluster_keys().into_iter().map(|k| self.members_of(k)).collect()
    }
}

/// Noisy blobs on the unit sphere with random DBSCAN parameters.
pub fn blob_instance(seed: u64) -> (Mat, f64, usize) {
    let mut r = rng(seed);
    let n = r.random_range(5..=100);
    let dim = r.random_range(3..=8);
    let centers: Vec<Vec<f64>> = (0..r.random_range(1..=6)).map(|_| unit_vec(&mut r, dim)).collect();
    let spread = r.random_range(0.05..0.4);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let c = &centers[r.random_range(0..centers.len())];
            let noise = gaussian(&mut r, dim);
            let v: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| a + spread * b).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let eps = r.random_range(0.01..0.3);
    let min_samples = r.random_range(1..=6);
    (Mat::from_rows(&rows).unwrap(), eps, min_samples)
}

pub fn random_cost(n: usize, m: usize, seed: u64) -> Mat {
    let mut r = rng(seed);
    let data = (0..n * m).map(|_| r.random_range(0.0..2.0)).collect();
    Mat::from_vec(n, m, data).unwrap()
}

/// Random query/gallery split. Odd seeds draw representations from a coarse
/// grid so that many similarities tie; some query identities are missing
/// from the gallery.
pub fn retrieval_instance(seed: u64) -> (EvalSet, EvalSet) {
    let mut r = rng(seed);
    let dim = 3;
    let identities = r.random_range(2..10);
    let draw = |r: &mut ChaCha8Rng| -> Vec<f64> {
        if seed % 2 == 1 {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1i32..=1) as f64).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    return v.into_iter().map(|x| x / norm).collect();
                }
            }
        }
        unit_vec(r, dim)
    };
    let make = |count: usize, pool: &[usize], r: &mut ChaCha8Rng, id_offset: usize| {
        let rows: Vec<Vec<f64>> = (0..count).map(|_| draw(r)).collect();
        let truth = (0..count).map(|_| pool[r.random_range(0..pool.len())]).collect();
        let mut ids: BTreeSet<usize> = BTreeSet::new();
        while ids.len() < count {
            ids.insert(id_offset + r.random_range(0..10 * count));
        }
        let mut record_ids: Vec<usize> = ids.into_iter().collect();
        use rand::seq::SliceRandom;
        record_ids.shuffle(r);
        EvalSet { reps: Mat::from_rows(&rows).unwrap(), truth, record_ids }
    };
    let gallery_pool: Vec<usize> = (0..identities).collect();
    let query_pool: Vec<usize> = (0..identities + 2).collect();
    let gallery = make(r.random_range(1..40), &gallery_pool, &mut r, 0);
    let query = make(r.random_range(1..20), &query_pool, &mut r, 10_000);
    (query, gallery)
}
