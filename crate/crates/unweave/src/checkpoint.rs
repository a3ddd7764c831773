//! Model checkpoints: parameters, optimiser state and where they came from.
//!
//! JSON with round-trip float formatting, so a save/load cycle is bit-exact.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unweave_core::optim::AdamState;
use unweave_core::Model;

pub const FORMAT: &str = "unweave-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lineage {
    pub profile: String,
    pub master_seed: u64,
    pub stage: Stage,
    /// SHA-256 of the checkpoint file this one was trained from.
    #[serde(default)]
    pub parent_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    /// Optimiser steps taken in this stage.
    pub step: u64,
    pub lineage: Lineage,
    pub model: Model,
    #[serde(default)]
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: Option<AdamState>, step: u64, lineage: Lineage) -> Self {
        Self {
            format: FORMAT.into(),
            step,
            lineage,
            model,
            optimizer,
        }
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.format != FORMAT {
            bail!("unsupported checkpoint format {:?}", self.format);
        }
        self.model.validate()?;
        if let Some(opt) = &self.optimizer {
            let params = self.model.named_params();
            if opt.m.len() != params.len() || opt.v.len() != params.len() {
                bail!("optimizer state has {} tensors, model has {}", opt.m.len(), params.len());
            }
            for ((name, p), (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
                if m.shape() != p.shape() || v.shape() != p.shape() {
                    bail!("optimizer moments for {name} have the wrong shape");
                }
            }
        }
        Ok(())
    }

    /// Writes to a temporary sibling and renames it into place; returns the
    /// file's SHA-256.
    pub fn save(&self, path: &Path) -> anyhow::Result<String> {
        let text = self.to_json()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &text).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(sha256_hex(text.as_bytes()))
    }

    /// Loads and checks a checkpoint; also returns the file's SHA-256.
    pub fn load(path: &Path) -> anyhow::Result<(Self, String)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ck = Self::from_json(&text).with_context(|| format!("checkpoint {}", path.display()))?;
        Ok((ck, sha256_hex(text.as_bytes())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
