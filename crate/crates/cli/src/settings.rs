//! Resolved run configuration plus the directories a command works in.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sda_core::pipeline::RunConfig;

use crate::exit::{BadConfig, OutputExists};

/// Environment variable naming the dataset directory.
pub const DATA_DIR_ENV: &str = "SDA_DATA_DIR";

pub struct Settings {
    pub config: RunConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub force: bool,
}

impl Settings {
    /// Precedence, lowest first: defaults, config file, `SDA_DATA_DIR`,
    /// flags. For `generate`, `--out` names the dataset directory.
    pub fn load(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>, force: bool, generating: bool) -> Result<Self> {
        let mut cfg = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| BadConfig(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                cfg.paths.data_dir = dir;
            }
        }
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            let out = out.to_string_lossy().into_owned();
            if generating {
                cfg.paths.data_dir = out;
            } else {
                cfg.paths.out_dir = out;
            }
        }
        let config = cfg.resolved()?;
        Ok(Self {
            data_dir: PathBuf::from(&config.paths.data_dir),
            out_dir: PathBuf::from(&config.paths.out_dir),
            config,
            force,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Fails when any of `paths` exists and `--force` is off.
    pub fn check_writable(&self, paths: &[PathBuf]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        match paths.iter().find(|p| p.exists()) {
            Some(p) => Err(OutputExists(p.clone()).into()),
            None => Ok(()),
        }
    }
}
