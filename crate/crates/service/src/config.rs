//! Service configuration: one TOML file, then environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct Config {
    pub bind: String,
    /// 0 picks a free port; the chosen address is printed at startup.
    pub port: u16,
    pub data_dir: PathBuf,
    pub block_batch_size: usize,
    /// Root URL responders call back to; defaults to the listen address.
    pub callback_base: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            bind: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("data"),
            block_batch_size: 1,
            callback_base: None,
        }
    }
}

pub const ENV_PORT: &str = "BPMNCHAIN_PORT";
pub const ENV_DATA_DIR: &str = "BPMNCHAIN_DATA_DIR";
pub const ENV_BLOCK_BATCH_SIZE: &str = "BPMNCHAIN_BLOCK_BATCH_SIZE";

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        toml::from_str(text).context("bad config")
    }

    /// Read `path` if given, apply overrides from `env`, then validate.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Config> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Config::from_toml(&text)?
            }
            None => Config::default(),
        };
        if let Some(v) = env(ENV_PORT) {
            cfg.port = v.parse().with_context(|| format!("{ENV_PORT}={v}"))?;
        }
        if let Some(v) = env(ENV_DATA_DIR) {
            cfg.data_dir = PathBuf::from(v);
        }
        if let Some(v) = env(ENV_BLOCK_BATCH_SIZE) {
            cfg.block_batch_size = v.parse().with_context(|| format!("{ENV_BLOCK_BATCH_SIZE}={v}"))?;
        }
        if cfg.block_batch_size == 0 {
            bail!("blockBatchSize must be at least 1");
        }
        Ok(cfg)
    }

    pub fn chain_path(&self) -> PathBuf {
        self.data_dir.join("chain.ndjson")
    }
}
