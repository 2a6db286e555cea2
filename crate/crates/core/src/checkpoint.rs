//! Versioned JSON container for policy and reward-model parameters.
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::diffro::RewardModel;
use crate::optim::ParamStore;
use crate::policy::{Decoder, DecoderArch, Policy, Role, TrainConfig};
use crate::world::Task;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongRole { expected: &'static str, found: String },
    #[error("checkpoint world seed {found} does not match {expected}")]
    WorldMismatch { expected: u64, found: u64 },
    #[error("parameter {name}: {detail}")]
    BadParameter { name: String, detail: String },
    #[error("policy checkpoint without a task")]
    MissingTask,
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointRole {
    Policy,
    RewardModel,
}

impl std::fmt::Display for CheckpointRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CheckpointRole::Policy => "policy",
            CheckpointRole::RewardModel => "reward_model",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub role: CheckpointRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    pub world_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    pub arch: DecoderArch,
    pub params: Vec<NamedArray>,
}

fn export(store: &ParamStore) -> Vec<NamedArray> {
    store
        .arrays
        .iter()
        .map(|(name, a)| NamedArray {
            name: name.clone(),
            shape: a.shape().to_vec(),
            data: a.data().to_vec(),
            frozen: store.is_frozen(name),
        })
        .collect()
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, world_seed: u64, train_config: Option<TrainConfig>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            role: CheckpointRole::Policy,
            task: Some(policy.task),
            world_seed,
            config_hash: None,
            train_config,
            arch: policy.decoder.arch.clone(),
            params: export(&policy.decoder.params),
        }
    }

    pub fn from_reward_model(rm: &RewardModel, world_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            role: CheckpointRole::RewardModel,
            task: None,
            world_seed,
            config_hash: None,
            train_config: None,
            arch: rm.decoder.arch.clone(),
            params: export(&rm.decoder.params),
        }
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    fn decoder(&self) -> Result<Decoder> {
        let mut params = ParamStore::new();
        for p in &self.params {
            let a = Array::new(p.shape.clone(), p.data.clone()).map_err(|e| CheckpointError::BadParameter {
                name: p.name.clone(),
                detail: e.to_string(),
            })?;
            if !a.all_finite() {
                return Err(CheckpointError::BadParameter {
                    name: p.name.clone(),
                    detail: "non-finite value".into(),
                });
            }
            params.insert(&p.name, a);
            if p.frozen {
                params.freeze(&p.name);
            }
        }
        // Compare against a fresh initialization to catch missing or
        // misshapen entries before they reach a kernel.
        let reference = Decoder::init(self.arch.clone(), None, 0).map_err(|e| CheckpointError::BadParameter {
            name: "arch".into(),
            detail: e.to_string(),
        })?;
        if !reference.params.same_layout(&params) {
            return Err(CheckpointError::BadParameter {
                name: "*".into(),
                detail: "parameter names or shapes do not match the architecture".into(),
            });
        }
        Ok(Decoder {
            arch: self.arch.clone(),
            params,
        })
    }

    pub fn check_world(&self, world_seed: u64) -> Result<()> {
        if self.world_seed != world_seed {
            return Err(CheckpointError::WorldMismatch {
                expected: world_seed,
                found: self.world_seed,
            });
        }
        Ok(())
    }

    pub fn into_policy(&self) -> Result<Policy> {
        self.expect(CheckpointRole::Policy)?;
        Ok(Policy {
            task: self.task.ok_or(CheckpointError::MissingTask)?,
            role: Role::Current,
            decoder: self.decoder()?,
        })
    }

    pub fn into_reward_model(&self) -> Result<RewardModel> {
        self.expect(CheckpointRole::RewardModel)?;
        Ok(RewardModel {
            decoder: self.decoder()?,
        })
    }

    fn expect(&self, role: CheckpointRole) -> Result<()> {
        if self.role != role {
            return Err(CheckpointError::WrongRole {
                expected: match role {
                    CheckpointRole::Policy => "policy",
                    CheckpointRole::RewardModel => "reward_model",
                },
                found: self.role.to_string(),
            });
        }
        Ok(())
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(input: impl BufRead) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_reader(input)?;
        let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        Ok(serde_json::from_value(value)?)
    }
}
