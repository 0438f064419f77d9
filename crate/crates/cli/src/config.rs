//! Run configuration: one TOML file with a section per pipeline part.

use std::path::{Path, PathBuf};

use msreid_core::{AblationFlags, ClusterConfig, Dims, Stage1Config, Stage2Config, Stage3Config};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Free-form label carried into reports.
    pub name: String,
    pub seed: u64,
    /// Where `msreid run` writes artifacts unless `--out` is given.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Load a saved dataset directory instead of generating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub num_identities: usize,
    pub images_per_group: usize,
    pub noise_sigma: f64,
    pub id_dim: usize,
    pub attr_dim: usize,
    pub input_dim: usize,
    /// Share of each scenario's identities used for training.
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
}

/// Variants times seeds; each combination runs in its own subdirectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variants: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub clustering: ClusterConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub ablation: AblationFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

/// Named default sets that a config file is layered over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Full-scale hyperparameters.
    Paper,
    /// Short schedules sized for one CPU core, with the clustering radius,
    /// learning rates and image-text temperature retuned to match.
    Desk,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let dims = Dims::default();
        let mut cfg = RunConfig {
            run: RunSection { name: "run".into(), seed: 0, output_dir: PathBuf::from("runs/run") },
            data: DataConfig {
                path: None,
                num_identities: 40,
                images_per_group: 8,
                noise_sigma: 0.08,
                id_dim: dims.id_dim,
                attr_dim: dims.attr_dim,
                input_dim: dims.input_dim,
                train_fraction: 0.75,
            },
            encoder: EncoderConfig { hidden_dim: 64, output_dim: 64 },
            clustering: ClusterConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            ablation: AblationFlags::default(),
            sweep: None,
        };
        if profile == Profile::Desk {
            cfg.stage1.epochs = 15;
            cfg.stage2.epochs = 15;
            cfg.stage3.epochs = 15;
            cfg.stage3.k = 8;
            cfg.clustering.eps = 0.2;
            cfg.stage1.lr = 1.5e-3;
            cfg.stage3.lr = 1.5e-3;
            cfg.stage2.lr = 0.3;
            cfg.stage2.temperature = 0.1;
        }
        cfg
    }

    /// Profile defaults with the file's keys merged over them.
    pub fn load(path: &Path, profile: Profile) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        Self::from_toml_str(&text, profile)
    }

    pub fn from_toml_str(text: &str, profile: Profile) -> CliResult<Self> {
        let overlay: toml::Table = toml::from_str(text)?;
        let mut base = toml::Table::try_from(Self::profile(profile))?;
        merge(&mut base, overlay);
        Ok(base.try_into()?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn dims(&self) -> Dims {
        Dims { id_dim: self.data.id_dim, attr_dim: self.data.attr_dim, input_dim: self.data.input_dim }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
