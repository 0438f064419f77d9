//! End-to-end orchestration: data, group division, three training stages,
//! evaluation, and the artifacts each step leaves in the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msreid_core::clustering::{
    divide_groups, pairwise_fscore, read_labels_csv, state_from_labels, write_labels_csv, Division,
};
use msreid_core::eval::{evaluate, EvalReport, EvalSet, ScenarioReport};
use msreid_core::stage1::run_stage1;
use msreid_core::stage2::run_stage2;
use msreid_core::stage3::{run_stage3, AblationFlags};
use msreid_core::synthgen::{default_specs, derive_seed, generate_dataset};
use msreid_core::{
    ClusterKey, ClusterState, Dataset, Group, GroupKey, ImageEncoder, ImageEncoderDims, ImageRecord, Mat,
    OfflineTextBank, TextEncoder, TrainRecord,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, IoContext};

const DATA_STREAM: u64 = 1;
const ENCODER_STREAM: u64 = 2;
const DIVISION_STREAM: u64 = 3;
const STAGE1_STREAM: u64 = 4;
const STAGE2_STREAM: u64 = 5;
const TEXT_STREAM: u64 = 6;
const STAGE3_STREAM: u64 = 7;

pub const FAILED_MARKER: &str = "FAILED";

/// Which pipeline steps to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSet {
    pub s1: bool,
    pub s2: bool,
    pub s3: bool,
    pub eval: bool,
}

impl StageSet {
    pub const ALL: StageSet = StageSet { s1: true, s2: true, s3: true, eval: true };
}

impl FromStr for StageSet {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let mut set = StageSet { s1: false, s2: false, s3: false, eval: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "s1" => set.s1 = true,
                "s2" => set.s2 = true,
                "s3" => set.s3 = true,
                "eval" => set.eval = true,
                other => return Err(CliError::Usage(format!("unknown stage {other:?} (expected s1, s2, s3, eval)"))),
            }
        }
        Ok(set)
    }
}

/// Runs the selected steps into `dir`. On failure a `FAILED` marker holding
/// the error is left beside whatever artifacts were already written.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path, stages: StageSet) -> CliResult<()> {
    fs::create_dir_all(dir).at(dir)?;
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).at(&marker)?;
    }
    let result = Pipeline::prepare(cfg, dir).and_then(|p| p.execute(stages));
    if let Err(e) = &result {
        fs::write(&marker, format!("{e}\n")).at(&marker)?;
    }
    result
}

/// Runs every (variant, seed) combination of the config's sweep section into
/// `dir/m{variant}_seed{seed}`. Failed runs keep their marker and do not stop
/// the sweep. Returns the run directories in sweep order.
pub fn run_sweep(cfg: &RunConfig, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let sweep = cfg.sweep.clone().ok_or_else(|| CliError::Usage("config has no [sweep] section".into()))?;
    let mut dirs = Vec::new();
    for &v in &sweep.variants {
        let flags = AblationFlags::variant(v).ok_or_else(|| CliError::Usage(format!("no ablation variant {v} (expected 1..=7)")))?;
        for &seed in &sweep.seeds {
            let mut c = cfg.clone();
            c.sweep = None;
            c.ablation = flags;
            c.run.seed = seed;
            c.run.name = format!("M{v}");
            let sub = dir.join(format!("m{v}_seed{seed}"));
            c.run.output_dir = sub.clone();
            if let Err(e) = run_pipeline(&c, &sub, StageSet::ALL) {
                log::error!("{}: {e}", sub.display());
            }
            dirs.push(sub);
        }
    }
    Ok(dirs)
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    dataset: Dataset,
    init: ImageEncoder,
    records: Vec<TrainRecord>,
    /// Generator identity of each training record; diagnostics only.
    truth: Vec<usize>,
    divisions: BTreeMap<usize, Division>,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").at(path)
}

fn ckpt_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

fn require(path: &Path, producer: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} is missing; run stage {producer} first", path.display())))
    }
}

impl<'a> Pipeline<'a> {
    fn prepare(cfg: &'a RunConfig, dir: &'a Path) -> CliResult<Self> {
        fs::write(dir.join("config.toml"), cfg.to_toml()).at(dir)?;
        let seed = cfg.run.seed;
        let dataset = match &cfg.data.path {
            Some(p) => Dataset::load(p)?,
            None => {
                let specs = default_specs(cfg.data.num_identities, cfg.data.images_per_group, cfg.data.noise_sigma);
                generate_dataset(&specs, cfg.dims(), derive_seed(seed, DATA_STREAM))?
            }
        };
        dataset.save(&dir.join("dataset"))?;
        let dims = ImageEncoderDims {
            input_dim: dataset.dims.input_dim,
            hidden_dim: cfg.encoder.hidden_dim,
            output_dim: cfg.encoder.output_dim,
            num_scenarios: dataset.num_scenarios(),
        };
        let init = ImageEncoder::init(dims, derive_seed(seed, ENCODER_STREAM), cfg.ablation.scenario_embedding)?;
        init.save(&ckpt_path(dir, "encoder_init"))?;
        let train: Vec<&ImageRecord> = dataset.train_records(cfg.data.train_fraction);
        let truth = train.iter().map(|r| r.truth_identity).collect();
        let (records, divisions) = divide_groups(&train, &dataset.specs, &init, derive_seed(seed, DIVISION_STREAM))?;
        write_json(&dir.join("division.json"), &divisions)?;
        drop(train);
        Ok(Self { cfg, dir, dataset, init, records, truth, divisions })
    }

    /// Pairwise F-score of pseudo-labels against identities, counting only
    /// pairs inside one homogeneous group.
    fn fscore(&self, state: &ClusterState) -> f64 {
        let pseudo: Vec<Option<ClusterKey>> =
            self.records.iter().zip(&state.record_labels).map(|(r, l)| l.map(|l| ClusterKey::new(r.key(), l))).collect();
        let truth: Vec<(GroupKey, usize)> = self.records.iter().zip(&self.truth).map(|(r, t)| (r.key(), *t)).collect();
        pairwise_fscore(&pseudo, &truth)
    }

    fn load_encoder(&self, name: &str) -> CliResult<ImageEncoder> {
        Ok(ImageEncoder::load(&ckpt_path(self.dir, name), self.cfg.ablation.scenario_embedding)?)
    }

    fn execute(self, stages: StageSet) -> CliResult<()> {
        if stages.s1 {
            self.stage1()?;
        }
        if stages.s2 {
            self.stage2()?;
        }
        if stages.s3 {
            self.stage3()?;
        }
        if stages.eval {
            self.eval()?;
        }
        Ok(())
    }

    fn stage1(&self) -> CliResult<()> {
        let mut cfg = self.cfg.stage1.clone();
        cfg.seed = derive_seed(self.cfg.run.seed, STAGE1_STREAM);
        let labels_dir = self.dir.join("labels");
        fs::create_dir_all(&labels_dir).at(&labels_dir)?;
        let path = self.dir.join("stage1_metrics.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let s = self.dataset.num_scenarios();
        let mut header = vec!["epoch".to_string(), "l_hc".into()];
        header.extend((0..s).map(|i| format!("clusters_s{i}")));
        header.extend(["outliers".to_string(), "fscore".into()]);
        w.write_record(&header)?;
        let mut err = None;
        let out = run_stage1(&self.records, self.init.clone(), &cfg, self.cfg.clustering, &mut |ep, state| {
            let mut row = vec![ep.epoch.to_string(), ep.loss.to_string()];
            row.extend(ep.clusters_per_scenario.iter().map(|c| c.to_string()));
            row.extend([ep.outliers.to_string(), self.fscore(state).to_string()]);
            let r = w.write_record(&row).map_err(CliError::from).and_then(|_| {
                let p = labels_dir.join(format!("epoch_{}_labels.csv", ep.epoch));
                write_labels_csv(&p, &self.records, &state.record_labels).map_err(CliError::from)
            });
            if let Err(e) = r {
                err.get_or_insert(e);
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        w.flush().at(&path)?;
        out.encoder.save(&ckpt_path(self.dir, "stage1"))?;
        write_labels_csv(&self.dir.join("stage1_labels.csv"), &self.records, &out.state.record_labels)?;
        log::info!("stage1 final pseudo-label F-score {:.4}", self.fscore(&out.state));
        Ok(())
    }

    fn stage2(&self) -> CliResult<()> {
        let labels_path = self.dir.join("stage1_labels.csv");
        require(&labels_path, "s1")?;
        let labels = read_labels_csv(&labels_path, &self.records)?;
        let reps = self.init.encode_all(&self.records)?;
        let state = state_from_labels(&self.records, &reps, &labels)?;
        let mut cfg = self.cfg.stage2.clone();
        cfg.seed = derive_seed(self.cfg.run.seed, STAGE2_STREAM);
        if !self.cfg.ablation.mss {
            cfg.lambda_mss = 0.0;
        }
        let text = TextEncoder::init(cfg.num_tokens, cfg.token_dim, self.cfg.encoder.output_dim, derive_seed(self.cfg.run.seed, TEXT_STREAM))?;
        let out = run_stage2(&self.records, &state, &self.init, &text, &cfg)?;
        out.bank.save(self.dir)?;
        let path = self.dir.join("stage2_metrics.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["epoch", "l_s2", "l_it", "l_ti", "l_mss", "min_mean_dist2"])?;
        for e in &out.history {
            w.write_record([
                e.epoch.to_string(),
                e.loss.to_string(),
                e.image_to_text.to_string(),
                e.text_to_image.to_string(),
                e.mss.to_string(),
                e.min_mean_dist2.to_string(),
            ])?;
        }
        w.flush().at(&path)?;
        Ok(())
    }

    fn stage3(&self) -> CliResult<()> {
        require(&ckpt_path(self.dir, "stage1"), "s1")?;
        require(&self.dir.join("text_bank.bin"), "s2")?;
        let encoder = self.load_encoder("stage1")?;
        let bank = OfflineTextBank::load(self.dir)?;
        let mut cfg = self.cfg.stage3.clone();
        cfg.seed = derive_seed(self.cfg.run.seed, STAGE3_STREAM);
        let pairs_dir = self.dir.join("pairs");
        fs::create_dir_all(&pairs_dir).at(&pairs_dir)?;
        let path = self.dir.join("stage3_metrics.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "epoch",
            "l_s3",
            "l_hc",
            "l_chc",
            "l_ihc",
            "l_tgc",
            "retained_pairs",
            "consistent_pairs",
            "mean_positive_set",
            "outliers",
            "fscore",
        ])?;
        let mut err = None;
        let out = run_stage3(&self.records, encoder, &bank, &cfg, self.cfg.clustering, self.cfg.ablation, &mut |ep, state, pairs| {
            let r = w
                .write_record([
                    ep.epoch.to_string(),
                    ep.total.to_string(),
                    ep.hc.to_string(),
                    ep.chc.to_string(),
                    ep.ihc.to_string(),
                    ep.tgc.to_string(),
                    ep.retained_pairs.to_string(),
                    ep.consistent_pairs.to_string(),
                    ep.mean_positive_set.to_string(),
                    ep.outliers.to_string(),
                    self.fscore(state).to_string(),
                ])
                .map_err(CliError::from)
                .and_then(|_| write_json(&pairs_dir.join(format!("pairs_epoch_{}.json", ep.epoch)), &pairs.to_json(&self.records)));
            if let Err(e) = r {
                err.get_or_insert(e);
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        w.flush().at(&path)?;
        out.encoder.save(&ckpt_path(self.dir, "stage3"))?;
        Ok(())
    }

    /// Latest trained encoder available in the run directory.
    fn final_encoder(&self) -> CliResult<ImageEncoder> {
        for name in ["stage3", "stage1"] {
            if ckpt_path(self.dir, name).exists() {
                return self.load_encoder(name);
            }
        }
        Ok(self.init.clone())
    }

    /// Group whose front-end encodes a held-out record.
    fn observed_group(&self, r: &ImageRecord) -> CliResult<Group> {
        match self.divisions.get(&r.scenario_id) {
            Some(d) => Ok(d.assign(&self.init.encode(&r.raw, r.scenario_id, Group::A)?)),
            None => Ok(r.group),
        }
    }

    fn eval(&self) -> CliResult<()> {
        let encoder = self.final_encoder()?;
        let test = self.dataset.test_records(self.cfg.data.train_fraction);
        let mut reports = Vec::new();
        for spec in &self.dataset.specs {
            let side = |g: Group| -> CliResult<EvalSet> {
                let rs: Vec<&&ImageRecord> = test.iter().filter(|r| r.scenario_id == spec.scenario_id && r.group == g).collect();
                let reps = rs
                    .iter()
                    .map(|r| Ok(encoder.encode(&r.raw, r.scenario_id, self.observed_group(r)?)?))
                    .collect::<CliResult<Vec<_>>>()?;
                Ok(EvalSet {
                    reps: if reps.is_empty() { Mat::zeros(0, encoder.dims().output_dim) } else { Mat::from_rows(&reps)? },
                    truth: rs.iter().map(|r| r.truth_identity).collect(),
                    record_ids: rs.iter().map(|r| r.record_id).collect(),
                })
            };
            let metrics = evaluate(&side(Group::B)?, &side(Group::A)?)?;
            log::info!(
                "eval scenario {} ({}): rank1={:.4} mAP={:.4} queries={}",
                spec.scenario_id,
                spec.kind.as_str(),
                metrics.rank1,
                metrics.map,
                metrics.num_queries
            );
            reports.push(ScenarioReport { scenario: spec.scenario_id, kind: spec.kind.as_str().to_string(), metrics });
        }
        write_json(&self.dir.join("eval_report.json"), &EvalReport::new(reports))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_list_parsing() {
        assert_eq!("s1,s2,s3,eval".parse::<StageSet>().unwrap(), StageSet::ALL);
        let only = "eval".parse::<StageSet>().unwrap();
        assert!(only.eval && !only.s1 && !only.s2 && !only.s3);
        assert!("s4".parse::<StageSet>().is_err());
    }
}
