//! End-to-end commands and their configuration and report formats.

pub mod checkpoint;
pub mod commands;
pub mod corpus;
pub mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::TrainConfig;
use crate::diffusion::{Schedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::injection::InjectionConfig;
use crate::mmdit::ModelConfig;
use crate::store;

pub use checkpoint::{init_checkpoint, Checkpoint, SubjectSource};
pub use commands::{
    ablate, adapt, generate, match_eval, AblateOptions, AblateRow, GenerateOptions, InitLatent, MatchEvalOptions,
    ReferenceInput,
};
pub use corpus::{gen_scene, Corpus};

pub const SCHEMA: &str = "wk-1";
/// Environment variable naming the default precision (`f32` or `f64`).
pub const PRECISION_ENV: &str = "WARPKIT_PRECISION";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a command needs besides its command-line arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub adaptation: TrainConfig,
    #[serde(default)]
    pub injection: InjectionConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: SCHEMA.into(),
            seed: 0,
            precision: None,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            adaptation: TrainConfig::default(),
            injection: InjectionConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Config(format!(
                "config schema {:?} is not supported, expected {SCHEMA:?}",
                self.schema
            )));
        }
        self.model.validate()?;
        Schedule::new(&self.schedule)?;
        self.adaptation.validate()?;
        self.injection.validate(self.model.layers)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_toml(path, self)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Explicit choice, else the config's, else `f32`.
    pub fn resolve_precision(&self, explicit: Option<Precision>) -> Precision {
        explicit.or(self.precision).unwrap_or_default()
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(&self.schedule)
    }
}

/// Metrics of one command run, tied to the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub software_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub precision: Precision,
    pub seconds: f64,
    pub metrics: serde_json::Value,
}

impl RunReport {
    pub fn new(command: &str, cfg: &RunConfig, precision: Precision) -> Result<Self> {
        Ok(RunReport {
            command: command.into(),
            software_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            precision,
            seconds: 0.0,
            metrics: serde_json::Value::Null,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        output::write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::Strategy;

    #[test]
    fn config_round_trips_losslessly() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.precision = Some(Precision::F64);
        cfg.injection = cfg.injection.with_strategy(Strategy::TokenConcat);
        cfg.paths.corpus = Some("corpus".into());
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_toml("schema = \"wk-1\"\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.injection.mask.tau_fg, 0.3);
        assert_eq!(cfg.injection.mask.tau_cc, 0.1);
    }

    #[test]
    fn unknown_keys_and_schemas_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("schema = \"wk-1\"\ncolour = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("schema = \"wk-1\"\n[model]\ndepth = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_toml("schema = \"wk-0\"\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("seed = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn precision_resolution_order() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_precision(None), Precision::F32);
        cfg.precision = Some(Precision::F64);
        assert_eq!(cfg.resolve_precision(None), Precision::F64);
        assert_eq!(cfg.resolve_precision(Some(Precision::F32)), Precision::F32);
        assert_eq!("f64".parse::<Precision>().unwrap(), Precision::F64);
        assert!("f16".parse::<Precision>().is_err());
    }
}
