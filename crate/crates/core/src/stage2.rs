//! Text representation learning: prompt tokens per pseudo-label are fitted
//! against frozen image and text encoders, then exported as an offline bank.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::PoolSampler;
use crate::clustering::{ClusterKey, ClusterState, Label};
use crate::encoders::{ImageEncoder, PromptTokens, TextEncoder, TextForward};
use crate::error::{ensure, Error, Result};
use crate::numerics::{axpy, softmax_xent_contrastive, sq_dist, Adam, Grads, Mat, Params};
use crate::synthgen::{Group, TrainRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    /// Records per scenario per step, groups mixed.
    pub batch_size: usize,
    pub lambda_mss: f64,
    /// Squared-distance margin of the scenario separation hinge.
    pub kappa: f64,
    pub num_tokens: usize,
    pub token_dim: usize,
    pub lr: f64,
    /// Logit temperature of the image-text terms.
    pub temperature: f64,
    /// Derived from the run seed at runtime, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lambda_mss: 2.0,
            kappa: 1.0,
            num_tokens: 4,
            token_dim: 16,
            lr: 3.5e-4,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Batch-level loss values and token gradients.
#[derive(Debug, Clone)]
pub struct Stage2Loss {
    /// `(L_it + L_ti) / N + lambda_mss * L_mss`
    pub loss: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub mss: f64,
    /// Smallest squared distance between two scenarios' batch-mean text reps;
    /// infinite when the batch covers fewer than two scenarios.
    pub min_mean_dist2: f64,
    pub grads: Grads,
}

/// Scenario separation hinge over ordered scenario pairs,
/// `sum_{g != h} [kappa - |mu_g - mu_h|^2]_+`, with its gradient per mean.
pub fn mss_hinge(means: &[Vec<f64>], kappa: f64) -> (f64, Vec<Vec<f64>>) {
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = means.iter().map(|m| vec![0.0; m.len()]).collect();
    for g in 0..means.len() {
        for h in 0..means.len() {
            if g == h {
                continue;
            }
            let gap = kappa - sq_dist(&means[g], &means[h]);
            if gap > 0.0 {
                loss += gap;
                for k in 0..means[g].len() {
                    let diff = means[g][k] - means[h][k];
                    grads[g][k] -= 2.0 * diff;
                    grads[h][k] += 2.0 * diff;
                }
            }
        }
    }
    (loss, grads)
}

/// Loss of one step. `batch` holds training-view indices; `image_reps` are
/// frozen-snapshot reps of every training record; `labels` are the Stage-I
/// pseudo-labels.
pub fn stage2_loss(
    records: &[TrainRecord],
    batch: &[usize],
    image_reps: &Mat,
    labels: &[Label],
    text: &TextEncoder,
    tokens: &PromptTokens,
    cfg: &Stage2Config,
) -> Result<Stage2Loss> {
    let key_of = |idx: usize| -> Result<ClusterKey> {
        let l = labels[idx].ok_or_else(|| Error::Contract(format!("record {} has no pseudo-label", records[idx].record_id)))?;
        let key = ClusterKey::new(records[idx].key(), l);
        ensure!(tokens.id(&key).is_some(), Contract, "no prompt tokens for pseudo-label {key}");
        Ok(key)
    };
    let keys = batch.iter().map(|&i| key_of(i)).collect::<Result<Vec<_>>>()?;
    let mut forwards: BTreeMap<ClusterKey, TextForward> = BTreeMap::new();
    for k in &keys {
        if !forwards.contains_key(k) {
            forwards.insert(*k, text.forward(tokens.tokens(k).expect("checked above"))?);
        }
    }
    let dim = text.output_dim();
    let mut grad_text: BTreeMap<ClusterKey, Vec<f64>> = forwards.keys().map(|k| (*k, vec![0.0; dim])).collect();

    let num_scenarios = batch.iter().map(|&i| records[i].scenario + 1).max().unwrap_or(0);
    let mut by_scenario: Vec<Vec<usize>> = vec![Vec::new(); num_scenarios];
    for (pos, &i) in batch.iter().enumerate() {
        by_scenario[records[i].scenario].push(pos);
    }

    let n = batch.len().max(1) as f64;
    let mut it_sum = 0.0;
    let mut ti_sum = 0.0;
    let mut means = Vec::new();
    let mut mean_members = Vec::new();
    for members in by_scenario.iter().filter(|m| !m.is_empty()) {
        let t_rows: Vec<&[f64]> = members.iter().map(|&p| forwards[&keys[p]].rep.as_slice()).collect();
        let t_mat = Mat::from_rows(&t_rows)?;
        let v_idx: Vec<usize> = members.iter().map(|&p| batch[p]).collect();
        let v_mat = image_reps.select_rows(&v_idx);
        for (m, &p) in members.iter().enumerate() {
            let it = softmax_xent_contrastive(v_mat.row(m), &t_mat, &[m], cfg.temperature, true)?;
            it_sum += it.loss;
            let cg = it.candidates.expect("candidate gradients requested");
            for (j, &q) in members.iter().enumerate() {
                axpy(grad_text.get_mut(&keys[q]).expect("key present"), 1.0 / n, cg.row(j));
            }
            let positives: Vec<usize> = (0..members.len()).filter(|&j| keys[members[j]] == keys[p]).collect();
            let ti = softmax_xent_contrastive(t_mat.row(m), &v_mat, &positives, cfg.temperature, false)?;
            ti_sum += ti.loss;
            axpy(grad_text.get_mut(&keys[p]).expect("key present"), 1.0 / n, &ti.anchor);
        }
        let mut mean = vec![0.0; dim];
        for r in t_mat.iter_rows() {
            axpy(&mut mean, 1.0 / members.len() as f64, r);
        }
        means.push(mean);
        mean_members.push(members.clone());
    }

    let (mss, mean_grads) = mss_hinge(&means, cfg.kappa);
    if cfg.lambda_mss != 0.0 {
        for (members, g) in mean_members.iter().zip(&mean_grads) {
            let w = cfg.lambda_mss / members.len() as f64;
            for &p in members {
                axpy(grad_text.get_mut(&keys[p]).expect("key present"), w, g);
            }
        }
    }
    let mut min_mean_dist2 = f64::INFINITY;
    for g in 0..means.len() {
        for h in g + 1..means.len() {
            min_mean_dist2 = min_mean_dist2.min(sq_dist(&means[g], &means[h]));
        }
    }

    let mut grads = Grads::for_params(tokens.params());
    for (k, g) in &grad_text {
        let tg = text.backward(&forwards[k], g);
        let id = tokens.id(k).expect("key present");
        grads.slot(id).iter_mut().zip(&tg).for_each(|(a, b)| *a += b);
    }
    Ok(Stage2Loss {
        loss: (it_sum + ti_sum) / n + cfg.lambda_mss * mss,
        image_to_text: it_sum / n,
        text_to_image: ti_sum / n,
        mss,
        min_mean_dist2,
        grads,
    })
}

/// Cluster- and instance-level text representations exported after training.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineTextBank {
    pub cluster_reps: BTreeMap<ClusterKey, Vec<f64>>,
    /// Keyed by record id.
    pub instance_reps: BTreeMap<usize, Vec<f64>>,
}

impl OfflineTextBank {
    /// Writes `text_bank.bin` (checkpoint format, tensors `cluster_reps` and
    /// `instance_reps`) and `text_bank_index.csv` mapping rows to keys.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let dim = self.cluster_reps.values().next().map_or(0, Vec::len);
        let mut params = Params::new();
        params.push("cluster_reps", self.cluster_reps.len(), dim, self.cluster_reps.values().flatten().copied().collect())?;
        params.push("instance_reps", self.instance_reps.len(), dim, self.instance_reps.values().flatten().copied().collect())?;
        std::fs::write(dir.join("text_bank.bin"), params.to_bytes())?;
        let mut w = csv::Writer::from_path(dir.join("text_bank_index.csv"))?;
        w.write_record(["kind", "row", "record_id", "scenario", "group", "label"])?;
        for (row, k) in self.cluster_reps.keys().enumerate() {
            w.write_record(["cluster".to_string(), row.to_string(), String::new(), k.scenario.to_string(), k.group.to_string(), k.label.to_string()])?;
        }
        for (row, id) in self.instance_reps.keys().enumerate() {
            w.write_record(["instance".to_string(), row.to_string(), id.to_string(), String::new(), String::new(), String::new()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = Params::from_bytes(&std::fs::read(dir.join("text_bank.bin"))?)?;
        let tensor = |name: &str| {
            params.find(name).map(|id| params.tensor(id)).ok_or_else(|| Error::Decode(format!("text bank lacks tensor {name}")))
        };
        let (clusters, instances) = (tensor("cluster_reps")?, tensor("instance_reps")?);
        let mut rdr = csv::Reader::from_path(dir.join("text_bank_index.csv"))?;
        let mut cluster_reps = BTreeMap::new();
        let mut instance_reps = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let get = |i: usize| row.get(i).unwrap_or("");
            let int = |i: usize| get(i).parse::<usize>().map_err(|e| Error::Decode(format!("text_bank_index.csv column {i}: {e}")));
            let r = int(1)?;
            let slice = |t: &crate::numerics::Tensor| -> Result<Vec<f64>> {
                ensure!(r < t.rows, Decode, "index row {r} beyond tensor {} ({} rows)", t.name, t.rows);
                Ok(t.data[r * t.cols..(r + 1) * t.cols].to_vec())
            };
            match get(0) {
                "cluster" => {
                    let key = ClusterKey { scenario: int(3)?, group: get(4).parse::<Group>()?, label: int(5)? };
                    cluster_reps.insert(key, slice(clusters)?);
                }
                "instance" => {
                    instance_reps.insert(int(2)?, slice(instances)?);
                }
                other => return Err(Error::Decode(format!("unknown text bank row kind {other:?}"))),
            }
        }
        ensure!(cluster_reps.len() == clusters.rows && instance_reps.len() == instances.rows, Decode, "text bank index does not cover every row");
        Ok(Self { cluster_reps, instance_reps })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub mss: f64,
    /// Minimum over the epoch's batches of the closest scenario-mean pair.
    pub min_mean_dist2: f64,
}

pub struct Stage2Output {
    pub bank: OfflineTextBank,
    pub tokens: PromptTokens,
    pub history: Vec<Stage2Epoch>,
}

/// Fits one prompt-token set per Stage-I pseudo-label. Both encoders are
/// borrowed immutably and stay untouched.
pub fn run_stage2(
    records: &[TrainRecord],
    state: &ClusterState,
    image_encoder: &ImageEncoder,
    text: &TextEncoder,
    cfg: &Stage2Config,
) -> Result<Stage2Output> {
    ensure!(
        text.num_tokens() == cfg.num_tokens && text.token_dim() == cfg.token_dim,
        Param,
        "text encoder expects {}x{} prompts, config says {}x{}",
        text.num_tokens(),
        text.token_dim(),
        cfg.num_tokens,
        cfg.token_dim
    );
    let image_reps = image_encoder.encode_all(records)?;
    let mut tokens = PromptTokens::init(state.cluster_keys(), cfg.num_tokens, cfg.token_dim, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let num_scenarios = image_encoder.dims().num_scenarios;
    let mut pools = vec![Vec::new(); num_scenarios];
    for (i, r) in records.iter().enumerate() {
        if state.record_labels[i].is_some() {
            pools[r.scenario].push(i);
        }
    }
    let mut sampler = PoolSampler::new(pools, cfg.batch_size, &mut rng);
    let mut adam = Adam::new(tokens.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let steps = sampler.steps_per_epoch();
        let mut acc = Stage2Epoch { epoch, loss: 0.0, image_to_text: 0.0, text_to_image: 0.0, mss: 0.0, min_mean_dist2: f64::INFINITY };
        for _ in 0..steps {
            let batch = sampler.next_batch(&mut rng);
            let l = stage2_loss(records, &batch, &image_reps, &state.record_labels, text, &tokens, cfg)?;
            adam.step(tokens.params_mut(), &l.grads, cfg.lr)?;
            acc.loss += l.loss / steps as f64;
            acc.image_to_text += l.image_to_text / steps as f64;
            acc.text_to_image += l.text_to_image / steps as f64;
            acc.mss += l.mss / steps as f64;
            acc.min_mean_dist2 = acc.min_mean_dist2.min(l.min_mean_dist2);
        }
        log::info!(
            "stage2 epoch {epoch}: L_s2={:.5} L_it={:.5} L_ti={:.5} L_mss={:.5} min_dist2={:.4}",
            acc.loss,
            acc.image_to_text,
            acc.text_to_image,
            acc.mss,
            acc.min_mean_dist2
        );
        history.push(acc);
    }
    let mut cluster_reps = BTreeMap::new();
    for key in state.cluster_keys() {
        cluster_reps.insert(key, text.encode(tokens.tokens(&key).expect("tokens exist for every cluster"))?);
    }
    let mut instance_reps = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(l) = state.record_labels[i] {
            instance_reps.insert(r.record_id, cluster_reps[&ClusterKey::new(r.key(), l)].clone());
        }
    }
    Ok(Stage2Output { bank: OfflineTextBank { cluster_reps, instance_reps }, tokens, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    #[test]
    fn identical_means_activate_every_hinge() {
        let means = vec![vec![0.3, -0.2]; 3];
        let (loss, grads) = mss_hinge(&means, 1.0);
        assert_eq!(loss, 6.0);
        assert!(grads.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn separated_means_give_zero_loss_and_gradient() {
        let means = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let (loss, grads) = mss_hinge(&means, 2.0);
        assert_eq!(loss, 0.0);
        assert!(grads.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        let means = [vec![0.1, 0.2, -0.3], vec![0.3, -0.1, 0.0], vec![-0.2, 0.25, 0.1]];
        let flat: Vec<f64> = means.concat();
        let f = |x: &[f64]| {
            let m: Vec<Vec<f64>> = x.chunks(3).map(|c| c.to_vec()).collect();
            let (l, g) = mss_hinge(&m, 1.0);
            (l, g.concat())
        };
        assert!(finite_diff_check(f, &flat, 1e-6) < 1e-8);
    }
}
