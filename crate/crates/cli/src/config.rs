use std::path::{Path, PathBuf};

use mgno::net::NetShape;
use mgno::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const RUN_SCHEMA: &str = "mgno-run/1";

/// Which part of a dataset directory to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Dataset directory; relative paths resolve against the config file.
    pub path: PathBuf,
    /// Split scored after every epoch. Defaults to `val` when non-empty.
    #[serde(default)]
    pub validate_on: Option<SplitName>,
}

fn default_eval_split() -> SplitName {
    SplitName::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Split scored after training.
    #[serde(default = "default_eval_split")]
    pub split: SplitName,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: default_eval_split() }
    }
}

/// A training run: data, network shape, optimizer settings and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub dataset: DatasetSection,
    pub model: NetShape,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    /// Write an intermediate checkpoint every this many epochs (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl RunConfig {
    /// Parses and checks everything that does not touch the filesystem.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Usage(format!("run config field `{}`: {}", e.path(), e.inner())))?;
        if cfg.schema != RUN_SCHEMA {
            return Err(CliError::Usage(format!(
                "run config field `schema`: expected {RUN_SCHEMA:?}, got {:?}",
                cfg.schema
            )));
        }
        cfg.model.config().map_err(|e| CliError::Usage(format!("run config field `model`: {e}")))?;
        cfg.train.validate().map_err(|e| CliError::Usage(format!("run config field `train`: {e}")))?;
        Ok(cfg)
    }

    /// Reads, parses and resolves the dataset path against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read run config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.dataset.path.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.dataset.path = base.join(&cfg.dataset.path);
        }
        if !cfg.dataset.path.join("meta.json").is_file() {
            return Err(CliError::Usage(format!(
                "run config field `dataset.path`: no dataset at {}",
                cfg.dataset.path.display()
            )));
        }
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// SHA-256 of the compact JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize");
    hex(&Sha256::digest(&json))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
