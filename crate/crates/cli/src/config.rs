use std::fs;
use std::path::{Path, PathBuf};

use atd3_core::agent::TrainConfig;
use atd3_core::baselines::GaConfig;
use atd3_core::data::{FilterCriteria, ScenarioMix, SynthConfig};
use atd3_core::eval::EventConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a subcommand needs. Unknown keys are rejected and every field has
/// a default, so `{}` is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides the seeds inside `train`, `ga` and synthesis.
    pub seed: u64,
    /// Dataset directory holding `index.json` and one CSV per episode.
    pub dataset: Option<PathBuf>,
    /// Seed of the vehicle-level train/test split, independent of `seed`.
    pub split_seed: u64,
    /// Vehicles in the training split; defaults to three quarters of them.
    pub train_vehicles: Option<usize>,
    /// Training vehicles held out for per-epoch evaluation. With 0, the first
    /// `monitor_episodes` training episodes are scored instead.
    pub validation_vehicles: usize,
    pub monitor_episodes: usize,
    /// Raw trajectory CSV and its units sidecar, for `ingest`.
    pub input: Option<PathBuf>,
    pub units: Option<PathBuf>,
    pub filter: FilterCriteria,
    /// Episode count and scenario weights, for `synth`.
    pub episodes: usize,
    pub mix: ScenarioMix,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub ga: GaConfig,
    /// Use at most this many training episodes for IDM calibration.
    pub calibration_episodes: Option<usize>,
    /// Actor checkpoints (`.bin`, manifest alongside) for `eval`, `attention`, `compare`.
    pub checkpoints: Vec<PathBuf>,
    /// Calibrated IDM parameters for `compare`.
    pub idm: Option<PathBuf>,
    pub events: EventConfig,
    /// Also write SVG renderings.
    pub svg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            split_seed: 0,
            train_vehicles: None,
            validation_vehicles: 0,
            monitor_episodes: 5,
            input: None,
            units: None,
            filter: FilterCriteria::default(),
            episodes: 20,
            mix: ScenarioMix::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            ga: GaConfig::default(),
            calibration_episodes: None,
            checkpoints: Vec::new(),
            idm: None,
            events: EventConfig::default(),
            svg: false,
        }
    }
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// `manifest.json`: enough to re-run a subcommand and check its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub subcommand: String,
    pub seed: u64,
    pub config: RunConfig,
    pub git_describe: String,
    pub tool_version: String,
    pub inputs: Vec<InputDigest>,
}

/// Reads either a plain [`RunConfig`] or a [`Manifest`], returning the config and
/// the manifest's subcommand if there was one.
pub fn load_config(path: &Path) -> Result<(RunConfig, Option<String>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if value.get("manifest_version").is_some() {
        let m: Manifest = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(CliError::Config(format!("unsupported manifest_version {}", m.manifest_version)));
        }
        Ok((m.config, Some(m.subcommand)))
    } else {
        let c: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok((c, None))
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<InputDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Run directory name: subcommand, a hash of the resolved config, and the seed.
pub fn run_dir_name(subcommand: &str, config: &RunConfig) -> String {
    let canonical = serde_json::to_string(&(subcommand, config)).expect("config serializes");
    let hash = sha256_hex(canonical.as_bytes());
    format!("{subcommand}-{}-seed{}", &hash[..12], config.seed)
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}
