//! Run configuration: one TOML file per run, CLI flags layered on top, and
//! a fully resolved snapshot written next to the outputs.

use std::path::{Path, PathBuf};

use facelora::data::{AugmentConfig, DepthMode, SubsetSpec, SynthConfig};
use facelora::eval::{EvalOptions, DEFAULT_FAR_TARGETS};
use facelora::seed;
use facelora::train::TrainConfig;
use facelora::vit::ViTConfig;
use serde::{Deserialize, Serialize};

/// Default run root when no output directory is given.
pub const RUN_ROOT_ENV: &str = "FACELORA_RUN_ROOT";

/// Name of the resolved-config snapshot inside a run directory.
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Evaluate,
    Merge,
    Subset,
    Synth,
    ReportBias,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Merge => "merge",
            Command::Subset => "subset",
            Command::Synth => "synth",
            Command::ReportBias => "report-bias",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Backbone weights. A seeded random backbone is used when absent.
    pub backbone: Option<PathBuf>,
    /// Name-mapping file for backbones stored under foreign names.
    pub mapping: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub protocol: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Merged model to evaluate instead of backbone + checkpoint.
    pub model: Option<PathBuf>,
    /// Precomputed embeddings keyed by protocol path.
    pub embeddings: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsetSection {
    /// Number of identities kept; all of them when absent.
    pub width: Option<usize>,
    pub depth_mode: DepthMode,
}

impl Default for SubsetSection {
    fn default() -> Self {
        Self {
            width: None,
            depth_mode: DepthMode::RandomIdentities,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub identities: usize,
    pub per_identity: usize,
    pub image_size: usize,
    /// Trailing images per identity kept out of training and used for the
    /// pair protocol.
    pub holdout: usize,
    pub groups: usize,
    pub nuisance: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            identities: 10,
            per_identity: 20,
            image_size: 56,
            holdout: 5,
            groups: 0,
            nuisance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub far_targets: Vec<f64>,
    pub use_cache: bool,
    /// Per-group bias block when the manifest carries groups.
    pub bias: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            far_targets: DEFAULT_FAR_TARGETS.to_vec(),
            use_cache: true,
            bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub command: Option<Command>,
    /// Every module seed is derived from this one.
    pub seed: u64,
    pub paths: Paths,
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub subset: SubsetSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
}


#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}line {line}: `{field}`: {message}", file_prefix(.file))]
    Parse {
        file: Option<PathBuf>,
        line: usize,
        field: String,
        message: String,
    },
    #[error(transparent)]
    Invalid(#[from] facelora::Error),
}

fn file_prefix(file: &Option<PathBuf>) -> String {
    file.as_ref().map(|f| format!("{}: ", f.display())).unwrap_or_default()
}

impl RunConfig {
    /// Desk-scale preset used by the end-to-end runs: a 6-block, width-64
    /// ViT on 56×56 synthetic faces, 30 epochs at batch 8 and lr 5e-3,
    /// without augmentation. Adapter and loss settings keep their defaults.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.vit = ViTConfig {
            image_size: 56,
            patch_size: 14,
            d_model: 64,
            n_heads: 4,
            n_layers: 6,
            mlp_ratio: 4.0,
            ..ViTConfig::default()
        };
        c.train.epochs = 30;
        c.train.batch_size = 8;
        c.train.base_lr = 5e-3;
        c.train.augment = AugmentConfig::none();
        c
    }

    /// Parses TOML text; unknown keys and type errors name the offending
    /// field and line.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            let line = inner
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            ConfigError::Parse {
                file: None,
                line,
                field,
                message: inner.message().trim().to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse {
                line,
                field,
                message,
                ..
            } => ConfigError::Parse {
                file: Some(path.to_path_buf()),
                line,
                field,
                message,
            },
            other => other,
        })
    }

    /// Semantic checks on every section.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.vit.validate()?;
        self.train.validate().map_err(|e| match e {
            facelora::Error::InvalidConfig { field, reason } if field.starts_with("lora.") => {
                facelora::Error::InvalidConfig {
                    field: format!("train.{field}"),
                    reason,
                }
            }
            other => other,
        })?;
        let lora = self.train.lora;
        if lora.rank > self.vit.d_model {
            return Err(facelora::Error::InvalidConfig {
                field: "train.lora.rank".into(),
                reason: format!("rank {} exceeds d_model {}", lora.rank, self.vit.d_model),
            }
            .into());
        }
        if self.subset.width == Some(0) {
            return Err(invalid("subset.width", "must be positive"));
        }
        if self.eval.far_targets.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(invalid("eval.far_targets", "targets must lie in (0, 1]"));
        }
        self.synth_config().validate()?;
        if self.synth.holdout >= self.synth.per_identity {
            return Err(invalid("synth.holdout", "must be smaller than synth.per_identity"));
        }
        Ok(())
    }

    /// TOML rendering of the configuration, used for snapshots.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    /// Writes the snapshot into `dir`, creating it if needed.
    pub fn write_snapshot(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    /// Output directory: the configured one, or `<run root>/<command>`
    /// where the run root comes from the environment (default `runs`).
    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| {
            let root = std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(self.command.map_or("run", Command::as_str))
        })
    }

    pub fn train_seed(&self) -> u64 {
        seed::derive(self.seed, "train")
    }

    pub fn backbone_seed(&self) -> u64 {
        seed::derive(self.seed, "backbone")
    }

    pub fn subset_spec(&self, available: usize) -> SubsetSpec {
        SubsetSpec {
            width: self.subset.width.unwrap_or(available),
            depth_mode: self.subset.depth_mode,
            seed: seed::derive(self.seed, "subset"),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            groups: self.synth.groups,
            nuisance: self.synth.nuisance,
            ..SynthConfig::new(
                self.synth.identities,
                self.synth.per_identity,
                self.synth.image_size,
                seed::derive(self.seed, "synth"),
            )
        }
    }

    pub fn pair_seed(&self) -> u64 {
        seed::derive(self.seed, "pairs")
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            far_targets: self.eval.far_targets.clone(),
            bias: false,
            use_cache: self.eval.use_cache,
        }
    }
}

fn invalid(field: &str, reason: &str) -> ConfigError {
    facelora::Error::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
    .into()
}
