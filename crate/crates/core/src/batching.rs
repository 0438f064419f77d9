//! Minibatch sampling and per-sample gradient accumulation shared by the
//! training stages.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::encoders::ImageEncoder;
use crate::error::Result;
use crate::numerics::Grads;
use crate::synthgen::TrainRecord;

/// Draws batches from several pools: each step takes up to `per_pool`
/// distinct items from every non-empty pool, in pool order. A pool that
/// cannot fill its share is reshuffled and restarted.
#[derive(Debug, Clone)]
pub struct PoolSampler {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    per_pool: usize,
}

impl PoolSampler {
    pub fn new(pools: Vec<Vec<usize>>, per_pool: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut pools = pools;
        for p in &mut pools {
            p.shuffle(rng);
        }
        let cursors = vec![0; pools.len()];
        Self { pools, cursors, per_pool: per_pool.max(1) }
    }

    /// Steps needed for the largest pool to be visited once.
    pub fn steps_per_epoch(&self) -> usize {
        self.pools.iter().map(|p| p.len().div_ceil(self.per_pool)).max().unwrap_or(0).max(1)
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::new();
        for (pool, cursor) in self.pools.iter_mut().zip(&mut self.cursors) {
            if pool.is_empty() {
                continue;
            }
            let take = self.per_pool.min(pool.len());
            if *cursor + take > pool.len() {
                pool.shuffle(rng);
                *cursor = 0;
            }
            batch.extend_from_slice(&pool[*cursor..*cursor + take]);
            *cursor += take;
        }
        batch
    }
}

/// Linear warmup: `lr * (epoch + 1) / warmup` during the first `warmup`
/// epochs, then `lr`.
pub fn warmup_lr(lr: f64, epoch: usize, warmup: usize) -> f64 {
    if epoch < warmup {
        lr * (epoch + 1) as f64 / warmup as f64
    } else {
        lr
    }
}

/// Per-sample loss components and `dL/d rep` for one anchor.
pub struct SampleTerm {
    pub components: Vec<f64>,
    pub grad_rep: Vec<f64>,
}

/// Encodes every batch record, lets `term` score it, and backpropagates the
/// returned representation gradient. Component sums and gradients are divided
/// by the batch size. Per-sample work runs in parallel; reduction is
/// sequential in batch order, so results do not depend on thread count.
pub fn accumulate<F>(
    encoder: &ImageEncoder,
    records: &[TrainRecord],
    batch: &[usize],
    num_components: usize,
    term: F,
) -> Result<(Vec<f64>, Grads)>
where
    F: Fn(usize, usize, &[f64]) -> Result<SampleTerm> + Sync,
{
    use rayon::prelude::*;
    let per_sample = batch
        .par_iter()
        .enumerate()
        .map(|(pos, &idx)| {
            let r = &records[idx];
            let fwd = encoder.forward(&r.raw, r.scenario, r.group)?;
            let t = term(pos, idx, &fwd.rep)?;
            let mut g = Grads::for_params(encoder.params());
            encoder.backward(&r.raw, &fwd, &t.grad_rep, &mut g);
            Ok((t.components, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![0.0; num_components];
    let mut grads = Grads::for_params(encoder.params());
    let n = batch.len().max(1) as f64;
    for (comp, g) in &per_sample {
        for (s, c) in sums.iter_mut().zip(comp) {
            *s += c;
        }
        grads.add_scaled(g, 1.0 / n);
    }
    sums.iter_mut().for_each(|s| *s /= n);
    Ok((sums, grads))
}
