//! Toy image and text encoders.
//!
//! The image encoder is `normalize(trunk(tanh(front_g(x) + e_s)))`: one
//! affine front-end per homogeneous group, an additive learnable embedding per
//! scenario, and a shared affine trunk. The text encoder is a frozen random
//! projection of `tokens + context`, standing in for a prompt-tuned text tower.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::clustering::ClusterKey;
use crate::error::{ensure, Error, Result};
use crate::numerics::{dot, normalize_in_place, Grads, Mat, Params, DEGENERATE_NORM};
use crate::synthgen::{Group, TrainRecord};

const FRONT_A_W: usize = 0;
const FRONT_A_B: usize = 1;
const FRONT_B_W: usize = 2;
const FRONT_B_B: usize = 3;
const SCENARIO_EMB: usize = 4;
const TRUNK_W: usize = 5;
const TRUNK_B: usize = 6;

const TENSOR_NAMES: [&str; 7] =
    ["front_a.weight", "front_a.bias", "front_b.weight", "front_b.bias", "scenario_emb", "trunk.weight", "trunk.bias"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageEncoderDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub num_scenarios: usize,
}

/// Cached activations of one forward pass, needed for backward.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub scenario: usize,
    pub group: Group,
    hidden: Vec<f64>,
    pre_norm: f64,
    pub rep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    params: Params,
    dims: ImageEncoderDims,
    scenario_embedding: bool,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Backpropagates through `rep = y / |y|`.
fn normalize_backward(rep: &[f64], pre_norm: f64, grad_rep: &[f64]) -> Vec<f64> {
    let rg = dot(rep, grad_rep);
    rep.iter().zip(grad_rep).map(|(r, g)| (g - r * rg) / pre_norm).collect()
}

impl ImageEncoder {
    /// Seeded "pre-trained" initialization. Both front-ends start from the
    /// same weights; scenario embeddings start at zero.
    pub fn init(dims: ImageEncoderDims, seed: u64, scenario_embedding: bool) -> Result<Self> {
        ensure!(
            dims.input_dim > 0 && dims.hidden_dim > 0 && dims.output_dim > 0 && dims.num_scenarios > 0,
            Param,
            "encoder dims must be positive: {dims:?}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let front_w = gaussian(&mut rng, dims.input_dim * dims.hidden_dim, 1.0);
        let trunk_w = gaussian(&mut rng, dims.hidden_dim * dims.output_dim, 1.0 / (dims.hidden_dim as f64).sqrt());
        let mut p = Params::new();
        p.push(TENSOR_NAMES[FRONT_A_W], dims.input_dim, dims.hidden_dim, front_w.clone())?;
        p.push(TENSOR_NAMES[FRONT_A_B], 1, dims.hidden_dim, vec![0.0; dims.hidden_dim])?;
        p.push(TENSOR_NAMES[FRONT_B_W], dims.input_dim, dims.hidden_dim, front_w)?;
        p.push(TENSOR_NAMES[FRONT_B_B], 1, dims.hidden_dim, vec![0.0; dims.hidden_dim])?;
        p.push(TENSOR_NAMES[SCENARIO_EMB], dims.num_scenarios, dims.hidden_dim, vec![0.0; dims.num_scenarios * dims.hidden_dim])?;
        p.push(TENSOR_NAMES[TRUNK_W], dims.hidden_dim, dims.output_dim, trunk_w)?;
        p.push(TENSOR_NAMES[TRUNK_B], 1, dims.output_dim, vec![0.0; dims.output_dim])?;
        Ok(Self { params: p, dims, scenario_embedding })
    }

    /// Rebuilds an encoder from a parameter store, checking names and shapes.
    pub fn from_params(params: Params, scenario_embedding: bool) -> Result<Self> {
        ensure!(params.len() == TENSOR_NAMES.len(), Decode, "image encoder needs {} tensors, got {}", TENSOR_NAMES.len(), params.len());
        for (i, name) in TENSOR_NAMES.iter().enumerate() {
            ensure!(params.tensor(i).name == *name, Decode, "tensor {i} is {:?}, expected {name:?}", params.tensor(i).name);
        }
        let t = |i: usize| params.tensor(i);
        let dims = ImageEncoderDims {
            input_dim: t(FRONT_A_W).rows,
            hidden_dim: t(FRONT_A_W).cols,
            output_dim: t(TRUNK_W).cols,
            num_scenarios: t(SCENARIO_EMB).rows,
        };
        let h = dims.hidden_dim;
        let shapes = [
            (dims.input_dim, h),
            (1, h),
            (dims.input_dim, h),
            (1, h),
            (dims.num_scenarios, h),
            (h, dims.output_dim),
            (1, dims.output_dim),
        ];
        for (i, want) in shapes.iter().enumerate() {
            ensure!((t(i).rows, t(i).cols) == *want, Decode, "tensor {} has shape {}x{}, expected {want:?}", t(i).name, t(i).rows, t(i).cols);
        }
        Ok(Self { params, dims, scenario_embedding })
    }

    pub fn dims(&self) -> ImageEncoderDims {
        self.dims
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn uses_scenario_embedding(&self) -> bool {
        self.scenario_embedding
    }

    pub fn scenario_embedding_row(&self, scenario: usize) -> &[f64] {
        let h = self.dims.hidden_dim;
        &self.params.tensor(SCENARIO_EMB).data[scenario * h..(scenario + 1) * h]
    }

    fn front_ids(group: Group) -> (usize, usize) {
        match group {
            Group::A => (FRONT_A_W, FRONT_A_B),
            Group::B => (FRONT_B_W, FRONT_B_B),
        }
    }

    pub fn forward(&self, raw: &[f64], scenario: usize, group: Group) -> Result<ImageForward> {
        let d = self.dims;
        ensure!(scenario < d.num_scenarios, Param, "scenario id {scenario} out of range (S = {})", d.num_scenarios);
        ensure!(raw.len() == d.input_dim, Shape, "input has dim {}, encoder expects {}", raw.len(), d.input_dim);
        let (wid, bid) = Self::front_ids(group);
        let w = &self.params.tensor(wid).data;
        let mut pre = self.params.tensor(bid).data.clone();
        if self.scenario_embedding {
            for (p, e) in pre.iter_mut().zip(self.scenario_embedding_row(scenario)) {
                *p += e;
            }
        }
        for (i, x) in raw.iter().enumerate() {
            let row = &w[i * d.hidden_dim..(i + 1) * d.hidden_dim];
            for (p, wij) in pre.iter_mut().zip(row) {
                *p += x * wij;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let tw = &self.params.tensor(TRUNK_W).data;
        let mut y = self.params.tensor(TRUNK_B).data.clone();
        for (i, hv) in hidden.iter().enumerate() {
            let row = &tw[i * d.output_dim..(i + 1) * d.output_dim];
            for (o, wij) in y.iter_mut().zip(row) {
                *o += hv * wij;
            }
        }
        let pre_norm = normalize_in_place(&mut y)?;
        Ok(ImageForward { scenario, group, hidden, pre_norm, rep: y })
    }

    pub fn encode(&self, raw: &[f64], scenario: usize, group: Group) -> Result<Vec<f64>> {
        self.forward(raw, scenario, group).map(|f| f.rep)
    }

    pub fn encode_record(&self, r: &TrainRecord) -> Result<Vec<f64>> {
        self.encode(&r.raw, r.scenario, r.group)
    }

    /// Encodes every record; rows follow input order.
    pub fn encode_all(&self, records: &[TrainRecord]) -> Result<Mat> {
        use rayon::prelude::*;
        let reps = records.par_iter().map(|r| self.encode_record(r)).collect::<Result<Vec<_>>>()?;
        if reps.is_empty() {
            return Ok(Mat::zeros(0, self.dims.output_dim));
        }
        Mat::from_rows(&reps)
    }

    /// Accumulates parameter gradients for one sample given `dL/d rep`.
    /// Only the sample's own front-end, its scenario row and the trunk are touched.
    pub fn backward(&self, raw: &[f64], fwd: &ImageForward, grad_rep: &[f64], grads: &mut Grads) {
        let d = self.dims;
        let dy = normalize_backward(&fwd.rep, fwd.pre_norm, grad_rep);
        {
            let gw = grads.slot(TRUNK_W);
            for (i, hv) in fwd.hidden.iter().enumerate() {
                let row = &mut gw[i * d.output_dim..(i + 1) * d.output_dim];
                for (g, dyj) in row.iter_mut().zip(&dy) {
                    *g += hv * dyj;
                }
            }
        }
        grads.slot(TRUNK_B).iter_mut().zip(&dy).for_each(|(g, v)| *g += v);
        let tw = &self.params.tensor(TRUNK_W).data;
        let dpre: Vec<f64> = fwd
            .hidden
            .iter()
            .enumerate()
            .map(|(i, hv)| {
                let row = &tw[i * d.output_dim..(i + 1) * d.output_dim];
                dot(row, &dy) * (1.0 - hv * hv)
            })
            .collect();
        let (wid, bid) = Self::front_ids(fwd.group);
        {
            let gw = grads.slot(wid);
            for (i, x) in raw.iter().enumerate() {
                let row = &mut gw[i * d.hidden_dim..(i + 1) * d.hidden_dim];
                for (g, dp) in row.iter_mut().zip(&dpre) {
                    *g += x * dp;
                }
            }
        }
        grads.slot(bid).iter_mut().zip(&dpre).for_each(|(g, v)| *g += v);
        if self.scenario_embedding {
            let h = d.hidden_dim;
            let ge = &mut grads.slot(SCENARIO_EMB)[fwd.scenario * h..(fwd.scenario + 1) * h];
            ge.iter_mut().zip(&dpre).for_each(|(g, v)| *g += v);
        }
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.params.to_bytes()
    }

    pub fn restore(bytes: &[u8], scenario_embedding: bool) -> Result<Self> {
        Self::from_params(Params::from_bytes(bytes)?, scenario_embedding)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.snapshot())?;
        Ok(())
    }

    pub fn load(path: &Path, scenario_embedding: bool) -> Result<Self> {
        Self::restore(&std::fs::read(path)?, scenario_embedding)
    }
}

/// Frozen text tower: `normalize(proj^T (tokens + context))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    num_tokens: usize,
    token_dim: usize,
    context: Vec<f64>,
    /// `(num_tokens * token_dim) x output_dim`
    proj: Mat,
}

#[derive(Debug, Clone)]
pub struct TextForward {
    pre_norm: f64,
    pub rep: Vec<f64>,
}

impl TextEncoder {
    pub fn init(num_tokens: usize, token_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        ensure!(num_tokens > 0 && token_dim > 0 && output_dim > 0, Param, "text encoder dims must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = num_tokens * token_dim;
        let context = gaussian(&mut rng, width, 1.0);
        let proj = Mat::from_vec(width, output_dim, gaussian(&mut rng, width * output_dim, 1.0 / (width as f64).sqrt()))?;
        Ok(Self { num_tokens, token_dim, context, proj })
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn output_dim(&self) -> usize {
        self.proj.cols()
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    /// `tokens` is the flattened `num_tokens x token_dim` prompt.
    pub fn forward(&self, tokens: &[f64]) -> Result<TextForward> {
        ensure!(
            tokens.len() == self.num_tokens * self.token_dim,
            Shape,
            "prompt has {} values, expected {} tokens of dim {}",
            tokens.len(),
            self.num_tokens,
            self.token_dim
        );
        let mut y = vec![0.0; self.output_dim()];
        for (i, (t, c)) in tokens.iter().zip(&self.context).enumerate() {
            let v = t + c;
            for (o, p) in y.iter_mut().zip(self.proj.row(i)) {
                *o += v * p;
            }
        }
        let pre_norm = crate::numerics::norm(&y);
        if pre_norm < DEGENERATE_NORM {
            return Err(Error::Degenerate(format!("text representation has norm {pre_norm:e}")));
        }
        y.iter_mut().for_each(|v| *v /= pre_norm);
        Ok(TextForward { pre_norm, rep: y })
    }

    pub fn encode(&self, tokens: &[f64]) -> Result<Vec<f64>> {
        self.forward(tokens).map(|f| f.rep)
    }

    /// Gradient with respect to the prompt tokens; projection and context are frozen.
    pub fn backward(&self, fwd: &TextForward, grad_rep: &[f64]) -> Vec<f64> {
        let dy = normalize_backward(&fwd.rep, fwd.pre_norm, grad_rep);
        self.proj.iter_rows().map(|row| dot(row, &dy)).collect()
    }
}

/// Learnable prompt tokens, one `num_tokens x token_dim` tensor per pseudo-label.
#[derive(Debug, Clone)]
pub struct PromptTokens {
    params: Params,
    index: BTreeMap<ClusterKey, usize>,
    num_tokens: usize,
    token_dim: usize,
}

impl PromptTokens {
    pub fn init(keys: impl IntoIterator<Item = ClusterKey>, num_tokens: usize, token_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut index = BTreeMap::new();
        for key in keys {
            if index.contains_key(&key) {
                continue;
            }
            let id = params.push(key.to_string(), num_tokens, token_dim, gaussian(&mut rng, num_tokens * token_dim, 1.0))?;
            index.insert(key, id);
        }
        Ok(Self { params, index, num_tokens, token_dim })
    }

    pub fn id(&self, key: &ClusterKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ClusterKey> {
        self.index.keys()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn tokens(&self, key: &ClusterKey) -> Option<&[f64]> {
        self.id(key).map(|id| self.params.tensor(id).data.as_slice())
    }

    pub fn tokens_mut(&mut self, key: &ClusterKey) -> Option<&mut Vec<f64>> {
        let id = self.id(key)?;
        Some(&mut self.params.tensor_mut(id).data)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_tokens, self.token_dim)
    }
}
