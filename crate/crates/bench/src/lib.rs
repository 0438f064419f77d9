//! Deterministic inputs for the benchmarks.

use msreid_core::{Group, ImageEncoder, ImageEncoderDims, Mat, TrainRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, r)).collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// `n` unit rows scattered around `clusters` centers.
pub fn clustered_reps(n: usize, dim: usize, clusters: usize, spread: f64, seed: u64) -> Mat {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| normalized(gaussian(&mut r, dim))).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let noise = gaussian(&mut r, dim);
            normalized(centers[i % clusters].iter().zip(&noise).map(|(c, e)| c + spread * e).collect())
        })
        .collect();
    Mat::from_rows(&rows).expect("rows share a width")
}

pub fn cost_matrix(n: usize, m: usize, seed: u64) -> Mat {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_vec(n, m, (0..n * m).map(|_| r.random_range(0.0..2.0)).collect()).expect("sized buffer")
}

pub fn unit_rows(n: usize, dim: usize, seed: u64) -> Mat {
    clustered_reps(n, dim, n.max(1), 0.0, seed)
}

/// Encoder with the pipeline's default shape plus one matching record.
pub fn encoder_and_record(seed: u64) -> (ImageEncoder, TrainRecord) {
    let dims = ImageEncoderDims { input_dim: 48, hidden_dim: 64, output_dim: 32, num_scenarios: 3 };
    let encoder = ImageEncoder::init(dims, seed, true).expect("valid dims");
    let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
    let record = TrainRecord { record_id: 0, scenario: 1, group: Group::B, raw: gaussian(&mut r, dims.input_dim) };
    (encoder, record)
}
