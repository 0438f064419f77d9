//! Homogeneous learning: alternate per-group clustering with contrastive
//! training of the image encoder against frozen cluster centroids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{accumulate, warmup_lr, PoolSampler, SampleTerm};
use crate::clustering::{cluster_groups, ClusterConfig, ClusterState};
use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::numerics::{softmax_xent_contrastive, Adam, GradPack};
use crate::synthgen::TrainRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Records per scenario per step, split evenly between the two groups.
    pub batch_size: usize,
    pub temperature: f64,
    pub lr: f64,
    pub warmup_epochs: usize,
    /// Derived from the run seed at runtime, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 64, temperature: 0.05, lr: 3.5e-4, warmup_epochs: 10, seed: 0 }
    }
}

/// Contrastive term of one anchor against its own group's centroids.
pub(crate) fn centroid_term(state: &ClusterState, records: &[TrainRecord], idx: usize, rep: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let label = state.record_labels[idx]
        .ok_or_else(|| Error::Contract(format!("record {} is an outlier and cannot anchor a loss term", records[idx].record_id)))?;
    let group = &state.groups[&records[idx].key()];
    let g = softmax_xent_contrastive(rep, &group.centroids.centroids, &[label], tau, false)?;
    Ok((g.loss, g.anchor))
}

/// Mean homogeneous contrastive loss over `batch` (training-view indices).
/// Centroids are constants; gradients flow into the encoder only.
pub fn homogeneous_loss(
    records: &[TrainRecord],
    batch: &[usize],
    encoder: &ImageEncoder,
    state: &ClusterState,
    temperature: f64,
) -> Result<GradPack> {
    let (sums, grads) = accumulate(encoder, records, batch, 1, |_, idx, rep| {
        let (loss, grad_rep) = centroid_term(state, records, idx, rep, temperature)?;
        Ok(SampleTerm { components: vec![loss], grad_rep })
    })?;
    Ok(GradPack { loss: sums[0], grads })
}

/// Per-epoch summary handed to observers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub clusters_per_scenario: Vec<usize>,
    pub outliers: usize,
}

pub struct Stage1Output {
    pub encoder: ImageEncoder,
    /// Clustering of the trained encoder's representations.
    pub state: ClusterState,
    pub history: Vec<Stage1Epoch>,
}

/// Runs the clustering/training loop. `observer` sees every epoch's summary
/// together with the clustering that epoch trained against.
pub fn run_stage1(
    records: &[TrainRecord],
    mut encoder: ImageEncoder,
    cfg: &Stage1Config,
    clustering: ClusterConfig,
    observer: &mut dyn FnMut(&Stage1Epoch, &ClusterState),
) -> Result<Stage1Output> {
    let num_scenarios = encoder.dims().num_scenarios;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(encoder.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let reps = encoder.encode_all(records)?;
        let state = cluster_groups(records, &reps, clustering)?;
        let mut sampler = PoolSampler::new(state.clustered_pools(), cfg.batch_size / 2, &mut rng);
        let lr = warmup_lr(cfg.lr, epoch, cfg.warmup_epochs);
        let steps = sampler.steps_per_epoch();
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = sampler.next_batch(&mut rng);
            let pack = homogeneous_loss(records, &batch, &encoder, &state, cfg.temperature)?;
            adam.step(encoder.params_mut(), &pack.grads, lr)?;
            total += pack.loss;
        }
        let report = Stage1Epoch {
            epoch,
            loss: total / steps as f64,
            clusters_per_scenario: state.clusters_per_scenario(num_scenarios),
            outliers: records.len() - state.num_clustered(),
        };
        log::info!(
            "stage1 epoch {epoch}: L_hc={:.5} clusters={:?} outliers={}",
            report.loss,
            report.clusters_per_scenario,
            report.outliers
        );
        observer(&report, &state);
        history.push(report);
    }
    let reps = encoder.encode_all(records)?;
    let state = cluster_groups(records, &reps, clustering)?;
    Ok(Stage1Output { encoder, state, history })
}
