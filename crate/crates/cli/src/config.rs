//! Config loading with CLI overrides, and run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use edge_grpo::trainer::{Mode, RunSummary, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "EDGE_GRPO_SEED";

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

/// Loads `path` and applies overrides with precedence flags > file >
/// `EDGE_GRPO_SEED` (seed only) > built-in defaults.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("{}: not valid JSON", path.display()))?;
    let file_has_seed = raw.get("seed").is_some();
    let mut config: TrainConfig = serde_json::from_value(raw)
        .with_context(|| format!("{}: invalid training config", path.display()))?;

    if !file_has_seed {
        if let Ok(v) = std::env::var(SEED_ENV) {
            config.seed = v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
        }
    }
    if let Some(mode) = overrides.mode {
        config.mode = mode;
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(steps) = overrides.steps {
        config.steps = steps;
    }
    config
        .validate()
        .with_context(|| format!("{}: invalid training config", path.display()))?;
    Ok(config)
}

/// SHA-256 over the canonical JSON encoding of the effective config.
pub fn config_hash(config: &TrainConfig) -> Result<String> {
    let canonical = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&canonical);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub metrics_path: PathBuf,
    pub policy_path: PathBuf,
    pub initial_eval_accuracy: f64,
    pub final_eval_accuracy: f64,
    pub mean_advantage_variance: f64,
    pub collapsed_fraction: f64,
}

impl RunRecord {
    pub fn new(config: &TrainConfig, summary: &RunSummary) -> Result<Self> {
        Ok(RunRecord {
            config_hash: config_hash(config)?,
            mode: summary.mode,
            seed: summary.seed,
            steps: summary.steps,
            metrics_path: summary.metrics_path.clone(),
            policy_path: summary.policy_path.clone(),
            initial_eval_accuracy: summary.initial_eval_accuracy,
            final_eval_accuracy: summary.final_eval_accuracy,
            mean_advantage_variance: summary.mean_advantage_variance,
            collapsed_fraction: summary.collapsed_fraction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_path: PathBuf,
    pub runs: Vec<RunRecord>,
    pub created_unix_ms: u128,
}

impl Manifest {
    pub fn new(config_path: &Path, runs: Vec<RunRecord>) -> Self {
        Manifest {
            version: version_string(),
            config_path: config_path.to_path_buf(),
            runs,
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
