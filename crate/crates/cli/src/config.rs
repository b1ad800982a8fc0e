//! Versioned experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sidetune::harness::{BaseConfig, ExperimentSpec, NamedStrategy, SequenceConfig};
use sidetune::strategies::{LossNorm, TrainBudget};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// One experiment document. Unknown keys are rejected everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Used when no `--seed` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory, relative to the config file; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub sequence: SequenceConfig,
    pub base: BaseConfig,
    pub strategies: Vec<NamedStrategy>,
    pub budget: TrainBudget,
    #[serde(default)]
    pub loss: LossNorm,
    #[serde(default)]
    pub rigidity: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.spec().validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let dir = if dir.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            dir
        };
        cfg.sequence.resolve_paths(&dir);
        if let Some(out) = &mut cfg.out {
            if out.is_relative() {
                *out = dir.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            sequence: self.sequence.clone(),
            base: self.base.clone(),
            strategies: self.strategies.clone(),
            budget: self.budget,
            loss: self.loss,
            rigidity: self.rigidity,
        }
    }
}
