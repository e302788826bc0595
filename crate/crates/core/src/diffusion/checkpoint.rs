//! Checkpoint container: magic, JSON header, then raw little-endian `f32`
//! parameter arrays in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, DenoiserModel};
use super::sample::SamplerConfig;
use super::schedule::NoiseSchedule;
use super::train::{TrainConfig, TrainLog};
use crate::controller::{ControllerConfig, Policy};
use crate::data::NormStats;
use crate::error::Error;
use crate::keypoints::KeypointConfig;

pub const MAGIC: &[u8; 8] = b"PRODAPT\x01";

/// Build identifier recorded in every checkpoint.
pub const GIT_DESCRIBE: &str = env!("PRODAPT_GIT_DESCRIBE");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: String,
    pub n_diff: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub schedule: ScheduleParams,
    pub norm: NormStats,
    pub controller: ControllerConfig,
    pub keypoints: KeypointConfig,
    pub sampler: SamplerConfig,
    pub train_config: Option<TrainConfig>,
    pub final_loss: Option<f64>,
    pub git_describe: String,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserModel<f32>,
    pub norm: NormStats,
    pub controller: ControllerConfig,
    pub keypoints: KeypointConfig,
    pub sampler: SamplerConfig,
    pub train_config: Option<TrainConfig>,
    pub final_loss: Option<f64>,
    pub git_describe: String,
}

impl Checkpoint {
    pub fn new(
        model: DenoiserModel<f32>,
        norm: NormStats,
        controller: ControllerConfig,
        keypoints: KeypointConfig,
        train_config: Option<TrainConfig>,
        log: Option<&TrainLog>,
    ) -> Self {
        Self {
            model,
            norm,
            controller,
            keypoints,
            sampler: SamplerConfig::default(),
            train_config,
            final_loss: log.and_then(|l| l.epochs.last()).map(|e| e.loss),
            git_describe: GIT_DESCRIBE.to_string(),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, Error> {
        NoiseSchedule::cosine(self.model.arch().n_diff)
    }

    pub fn policy(&self) -> Result<Policy<DenoiserModel<f32>>, Error> {
        Ok(Policy {
            model: self.model.clone(),
            schedule: self.schedule()?,
            norm: self.norm.clone(),
            sampler: self.sampler,
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            architecture: self.model.arch().clone(),
            schedule: ScheduleParams {
                kind: "squared-cosine".into(),
                n_diff: self.model.arch().n_diff,
            },
            norm: self.norm.clone(),
            controller: self.controller,
            keypoints: self.keypoints,
            sampler: self.sampler,
            train_config: self.train_config.clone(),
            final_loss: self.final_loss,
            git_describe: self.git_describe.clone(),
            arrays: self
                .model
                .named_arrays()
                .into_iter()
                .map(|(spec, _)| ArrayEntry {
                    name: spec.name.clone(),
                    shape: spec.shape.clone(),
                    offset: spec.offset,
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.model.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.model.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize.checked_add(header_len).ok_or_else(|| bad("header length overflows"))?;
        if bytes.len() < data_start {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..data_start])?;
        if header.schedule.kind != "squared-cosine" || header.schedule.n_diff != header.architecture.n_diff {
            return Err(bad("unsupported or inconsistent noise schedule"));
        }
        header.norm.validate()?;
        let data = &bytes[data_start..];
        if data.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values"));
        }
        let params: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let model = DenoiserModel::from_params(&header.architecture, params)?;
        let expected: Vec<ArrayEntry> = model
            .named_arrays()
            .into_iter()
            .map(|(spec, _)| ArrayEntry {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                offset: spec.offset,
            })
            .collect();
        if expected != header.arrays {
            return Err(bad("array index does not match the architecture"));
        }
        if !model.all_finite() {
            return Err(bad("parameters contain non-finite values"));
        }
        Ok(Self {
            model,
            norm: header.norm,
            controller: header.controller,
            keypoints: header.keypoints,
            sampler: header.sampler,
            train_config: header.train_config,
            final_loss: header.final_loss,
            git_describe: header.git_describe,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
