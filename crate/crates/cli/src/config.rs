//! Run configuration: a TOML file merged with command-line flags.
//!
//! ```toml
//! manifest = "data/manifest.json"
//! out = "runs/bcel"
//!
//! [phantom]        # PhantomSpec fields
//! seed = 7
//! n_patients = 20
//!
//! [model]          # UNetConfig fields
//! base_channels = 8
//! depth = 3
//!
//! [train]          # TrainConfig fields
//! seed = 1
//! loss = "bcel"
//! learning_rate = 1e-3
//!
//! [eval]
//! threshold = 0.5
//! jobs = 1
//! folds = 5
//! ```

use std::path::{Path, PathBuf};

use ptvseg::metrics::MetricOptions;
use ptvseg::phantom::PhantomSpec;
use ptvseg::trainer::TrainConfig;
use ptvseg::unet::UNetConfig;
use serde::{Deserialize, Serialize};

/// Output root used when neither `--out`, the config file nor this variable is set.
pub const OUT_ENV: &str = "PTVSEG_OUT";
pub const DEFAULT_OUT: &str = "ptvseg-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Rotations trained concurrently by `cv`.
    pub jobs: usize,
    pub folds: usize,
    pub metrics: MetricOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            jobs: 1,
            folds: 5,
            metrics: MetricOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub phantom: PhantomSpec,
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// A parsed config file, plus whether it pinned the training seed.
#[derive(Debug, Default)]
pub struct Loaded {
    pub config: RunConfig,
    pub train_seed_set: bool,
}

pub fn load(path: Option<&Path>) -> Result<Loaded, String> {
    let Some(path) = path else {
        return Ok(Loaded::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let train_seed_set = table
        .get("train")
        .and_then(|t| t.as_table())
        .is_some_and(|t| t.contains_key("seed"));
    let config = RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Loaded { config, train_seed_set })
}

impl RunConfig {
    /// Output directory: flag or file, then `PTVSEG_OUT`, then `ptvseg-out`.
    pub fn resolve_out(&mut self) -> PathBuf {
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        self.out = Some(out.clone());
        out
    }

    /// The sections a command uses, rendered as TOML.
    pub fn render(&self, sections: &[&str]) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut keep = toml::Table::new();
        if let toml::Value::Table(t) = value {
            for (k, v) in t {
                if sections.contains(&k.as_str()) {
                    keep.insert(k, v);
                }
            }
        }
        toml::to_string(&keep).expect("table serializes")
    }
}
