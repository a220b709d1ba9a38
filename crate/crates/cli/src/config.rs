use std::fs;
use std::path::{Path, PathBuf};

use emrmsf_core::evaluation::{DepthConfig, OutlierThresholds, DEFAULT_ODOMETRY_LENGTHS};
use emrmsf_core::losses::LossWeights;
use emrmsf_core::refine::OptimizerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Run configuration; an empty JSON object gives the published defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            evaluation: EvaluationConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    None,
    /// Least-squares scale of the camera centers about the origin.
    Scale,
    Sim3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub outliers: OutlierThresholds,
    pub depth: DepthConfig,
    pub odometry_lengths: Vec<f64>,
    pub odometry_alignment: Alignment,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            outliers: OutlierThresholds::default(),
            depth: DepthConfig::default(),
            odometry_lengths: DEFAULT_ODOMETRY_LENGTHS.to_vec(),
            odometry_alignment: Alignment::None,
        }
    }
}

/// Fallbacks for the path flags; relative entries resolve against the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub frame: Option<PathBuf>,
    pub estimate: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| emrmsf_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                cfg.schema_version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.frame,
            &mut cfg.paths.estimate,
            &mut cfg.paths.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.weights.validate()?;
        cfg.optimizer.validate()?;
        Ok(cfg)
    }
}

/// Flag value, else the config entry, else a usage error naming the flag.
pub fn pick(
    flag: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone()).ok_or_else(|| {
        CliError::Usage(format!(
            "--{name} is required (or set paths.{name} in the config)"
        ))
    })
}
