use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use coldstart_core::synthetic::SyntheticConfig;
use coldstart_core::{BpmfConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub user_fraction: f64,
    pub movie_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            user_fraction: 0.75,
            movie_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    pub idle_timeout_secs: u64,
    /// Session journal file; empty disables journalling.
    pub journal: String,
    /// Allowed CORS origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            port: 8080,
            idle_timeout_secs: 3600,
            journal: String::new(),
            cors_origins: Vec::new(),
        }
    }
}

/// Everything the CLI reads from `--config`, before flag overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Master seed for the split, BPMF and training.
    pub seed: u64,
    /// Directory holding `ratings.dat` and `movies.dat`; empty means unset.
    pub data_dir: String,
    /// Where artifacts and run directories are written.
    pub work_dir: PathBuf,
    pub split: SplitConfig,
    pub bpmf: BpmfConfig,
    pub train: TrainConfig,
    pub serve: ServeConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            seed: 0,
            data_dir: String::new(),
            work_dir: PathBuf::from("coldstart-work"),
            split: SplitConfig::default(),
            bpmf: BpmfConfig::default(),
            train: TrainConfig::default(),
            serve: ServeConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => CliConfig::default(),
        };
        config.propagate_seed();
        Ok(config)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        self.bpmf.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `key = default` for every configuration key, in dotted form.
pub fn documented_keys() -> Vec<String> {
    let value = toml::Value::try_from(CliConfig::default()).expect("config serializes");
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    lines.push("bpmf.nu0 = <bpmf.dim>".to_string());
    lines.sort();
    lines
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
