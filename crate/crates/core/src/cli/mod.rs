//! Experiment harness plumbing shared by the binary: config loading with
//! flag overrides, run manifests, checkpoints, and CSV outputs.

mod checkpoint;
mod output;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use output::{format_sig9, heatmap_csv, metrics_csv, metrics_row, parse_heatmap, write_heatmap, write_metrics, METRICS_HEADER};

use crate::envs::{Dfa, EnvKind};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Name of the environment variable that overrides the config seed.
pub const SEED_ENV: &str = "SOFTFLOW_SEED";

/// Command-line values that replace config keys one for one.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub env: Option<EnvKind>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub batch_size: Option<usize>,
    pub steps: Option<u64>,
    /// Sets both buffer capacities.
    pub capacity: Option<usize>,
    pub oracle: Option<PathBuf>,
    pub rs_baseline: bool,
    pub mutation_negatives: bool,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(e) = self.env {
            cfg.env = e;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(c) = self.capacity {
            cfg.capacity_pos = c;
            cfg.capacity_neg = c;
        }
        if let Some(path) = &self.oracle {
            cfg.seq.oracle = Some(load_oracle(path)?.to_document());
        }
        cfg.rs_baseline |= self.rs_baseline;
        cfg.mutation_negatives |= self.mutation_negatives;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()
    }
}

/// Reads a config file; absent keys take the environment's defaults.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path)
}

/// Config from an optional file plus overrides. Without a file, `--env`
/// picks the defaults.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match (path, overrides.env) {
        (Some(p), _) => load_config(p)?,
        (None, Some(env)) => TrainConfig::defaults(env),
        (None, None) => return Err(Error::Config("either a config file or --env is required".into())),
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

pub fn load_oracle(path: &Path) -> Result<Dfa> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dfa::from_json(&text)
}

/// Applies a seed taken from [`SEED_ENV`]; `value` is the variable's
/// content, if set. Returns the seed that was applied.
pub fn apply_seed_env(cfg: &mut TrainConfig, value: Option<&str>) -> Result<Option<u64>> {
    let Some(v) = value else { return Ok(None) };
    let seed: u64 = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    cfg.seed = seed;
    Ok(Some(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub seed: u64,
    /// Where the seed came from: `config` or the environment variable.
    pub seed_source: String,
    pub version: String,
    pub started_unix_secs: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig, seed_from_env: bool, outputs: Vec<PathBuf>) -> Self {
        let started = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            command: command.into(),
            config: config.clone(),
            seed: config.seed,
            seed_source: if seed_from_env { SEED_ENV.into() } else { "config".into() },
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix_secs: started,
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
