//! Run configuration: one JSON document holding named profiles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unweave_core::baselines::PredictabilityConfig;
use unweave_core::controller::{ControllerKind, UpdateKind};
use unweave_core::optim::LrSchedule;
use unweave_core::storygen::{NaturalStoryConfig, SynthStoryConfig, WorldConfig};
use unweave_core::train::{FinetuneConfig, TrainConfig};
use unweave_core::ModelConfig;

pub const DESK: &str = "desk";
pub const PAPER_SCALE: &str = "paper-scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Independent streams that synthetic stories are cut from.
    pub pretrain_streams: usize,
    /// Length of each stream natural stories are extracted from; train, val
    /// and test each get their own stream.
    pub natural_stream_len: usize,
    /// Natural stories are balanced over thread counts `1..=max_threads`.
    pub max_threads: usize,
    pub train_per_bucket: usize,
    pub val_per_bucket: usize,
    pub test_per_bucket: usize,
    /// Window draws allowed while filling the buckets.
    pub max_draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Worker threads for per-story evaluation.
    pub workers: usize,
    /// Kernel settings for the predictability baseline; the threshold is
    /// refitted on validation.
    pub predictability: PredictabilityConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub synthetic: SynthStoryConfig,
    pub natural: NaturalStoryConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Small dimensions and step counts for one CPU core.
    pub fn desk() -> Self {
        Self {
            profile: DESK.into(),
            seed: 42,
            output_dir: PathBuf::from("runs/desk"),
            world: WorldConfig::desk(),
            synthetic: SynthStoryConfig::desk(),
            natural: NaturalStoryConfig::desk(),
            data: DataConfig {
                pretrain_streams: 4,
                natural_stream_len: 200_000,
                max_threads: 4,
                train_per_bucket: 30,
                val_per_bucket: 30,
                test_per_bucket: 30,
                max_draws: 100_000,
            },
            model: ModelConfig::desk(ControllerKind::Transformer, UpdateKind::Gru),
            pretrain: TrainConfig::desk(),
            finetune: FinetuneConfig::desk(),
            eval: EvalConfig {
                workers: 1,
                predictability: PredictabilityConfig::default(),
            },
        }
    }

    /// Full-size dimensions and schedule; needs far more compute than a desk.
    pub fn paper_scale() -> Self {
        let mut cfg = Self::desk();
        cfg.profile = PAPER_SCALE.into();
        cfg.output_dir = PathBuf::from("runs/paper-scale");
        cfg.world.feature_dim = 256;
        cfg.world.scene_rank = 64;
        cfg.world.stream_len = 400_000;
        cfg.data.pretrain_streams = 16;
        cfg.model.clip_dim = 256;
        cfg.model.state_dim = 256;
        cfg.model.embed_dim = 512;
        cfg.model.heads = 4;
        cfg.model.ff_dim = 2048;
        cfg.pretrain.steps = 50_000;
        cfg.pretrain.schedule = LrSchedule::two_phase(2e-4, 25_000, 2e-5);
        cfg.pretrain.dropout = 0.2;
        cfg.pretrain.checkpoint_every = 5_000;
        cfg.finetune.lr = 2e-5;
        cfg
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            DESK => Some(Self::desk()),
            PAPER_SCALE => Some(Self::paper_scale()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |section: &'static str| move |e: unweave_core::Error| ConfigError::Invalid {
            path: section.into(),
            reason: e.to_string(),
        };
        self.world.validate().map_err(wrap("world"))?;
        self.synthetic.validate().map_err(wrap("synthetic"))?;
        self.natural.validate().map_err(wrap("natural"))?;
        self.model.validate().map_err(wrap("model"))?;
        self.pretrain.validate().map_err(wrap("pretrain"))?;
        self.finetune.validate().map_err(wrap("finetune"))?;
        self.eval.predictability.validate().map_err(wrap("eval.predictability"))?;
        let invalid = |path: &str, reason: &str| ConfigError::Invalid {
            path: path.into(),
            reason: reason.into(),
        };
        if self.model.clip_dim != self.world.feature_dim {
            return Err(invalid("model.clip_dim", "must equal world.feature_dim"));
        }
        if self.data.pretrain_streams == 0 {
            return Err(invalid("data.pretrain_streams", "must be positive"));
        }
        if self.data.max_threads == 0 {
            return Err(invalid("data.max_threads", "must be positive"));
        }
        if self.data.val_per_bucket == 0 || self.data.train_per_bucket == 0 || self.data.test_per_bucket == 0 {
            return Err(invalid("data", "every split needs at least one story per bucket"));
        }
        if self.eval.workers == 0 {
            return Err(invalid("eval.workers", "must be positive"));
        }
        Ok(())
    }
}

/// The on-disk document: `{"profiles": {"desk": {...}, ...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub profiles: BTreeMap<String, RunConfig>,
}

impl ConfigFile {
    pub fn builtin() -> Self {
        let profiles = [RunConfig::desk(), RunConfig::paper_scale()]
            .into_iter()
            .map(|c| (c.profile.clone(), c))
            .collect();
        Self { profiles }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Invalid {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        for (name, cfg) in &file.profiles {
            if &cfg.profile != name {
                return Err(ConfigError::Invalid {
                    path: format!("profiles.{name}.profile"),
                    reason: format!("profile field {:?} does not match its key", cfg.profile),
                });
            }
            cfg.validate().map_err(|e| e.under(&format!("profiles.{name}")))?;
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn profile(&self, name: &str) -> Result<RunConfig, ConfigError> {
        self.profiles
            .get(name)
            .cloned()
            .ok_or_else(|| ConfigError::UnknownProfile(name.into()))
    }
}

/// Resolves `--config` / `--profile`: a file's profile when a file is given,
/// else a built-in one.
pub fn resolve(config: Option<&Path>, profile: &str) -> Result<RunConfig, ConfigError> {
    match config {
        Some(p) => ConfigFile::load(p)?.profile(profile),
        None => RunConfig::builtin(profile).ok_or_else(|| ConfigError::UnknownProfile(profile.into())),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config error at {path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("unknown profile {0:?}")]
    UnknownProfile(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    fn under(self, prefix: &str) -> Self {
        match self {
            Self::Invalid { path, reason } => Self::Invalid {
                path: format!("{prefix}.{path}"),
                reason,
            },
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_profiles_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn builtin_document_round_trips() {
        let text = serde_json::to_string_pretty(&ConfigFile::builtin()).unwrap();
        assert_eq!(ConfigFile::parse(&text).unwrap(), ConfigFile::builtin());
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let mut v = serde_json::to_value(ConfigFile::builtin()).unwrap();
        v["profiles"]["desk"]["world"]["colour"] = 3.into();
        match ConfigFile::parse(&v.to_string()) {
            Err(ConfigError::Invalid { path, reason }) => {
                assert_eq!(path, "profiles.desk.world.colour");
                assert!(reason.contains("colour"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_error_reports_its_path() {
        let mut v = serde_json::to_value(ConfigFile::builtin()).unwrap();
        v["profiles"]["desk"]["model"]["clip_dim"] = 7.into();
        match ConfigFile::parse(&v.to_string()) {
            Err(ConfigError::Invalid { path, .. }) => assert!(path.starts_with("profiles.desk.model"), "{path}"),
            other => panic!("{other:?}"),
        }
    }
}
