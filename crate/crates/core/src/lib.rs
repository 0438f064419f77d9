//! Unsupervised multi-scenario person re-identification on synthetic
//! feature data: homogeneous clustering, prompt-token text learning, and
//! heterogeneous matching, built on hand-derived gradients.

#![allow(clippy::needless_range_loop)]

pub mod batching;
pub mod clustering;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod synthgen;

pub use clustering::{ClusterConfig, ClusterKey, ClusterState, Label};
pub use encoders::{ImageEncoder, ImageEncoderDims, PromptTokens, TextEncoder};
pub use error::{Error, Result};
pub use stage1::Stage1Config;
pub use stage2::{OfflineTextBank, Stage2Config};
pub use stage3::{AblationFlags, ChmMode, InstanceMode, Stage3Config, TextState};
pub use numerics::{GradPack, Grads, Mat, Params};
pub use synthgen::{Dataset, Dims, Group, GroupKey, ImageRecord, ScenarioKind, ScenarioSpec, TrainRecord};
