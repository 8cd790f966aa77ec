//! Run manifests: one JSON record per CLI invocation, written atomically at
//! run end. The resolved config (all defaults materialized) plus the seed
//! is enough to reproduce the run's curves.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::Result;

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "MAESEG_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// Full config with every default materialized.
    pub resolved_config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    /// RFC 3339 UTC timestamp taken at run start.
    pub start_time: String,
    /// Artifact key -> path, mirroring the KEY=PATH stdout lines.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, cfg: &Config, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            resolved_config: serde_json::to_value(cfg).expect("config serializes"),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            start_time: chrono::Utc::now().to_rfc3339(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Record an artifact and echo the KEY=PATH line for scripting.
    pub fn add_artifact(&mut self, key: &str, path: &Path) {
        self.artifacts.insert(key.to_string(), path.display().to_string());
        println!("{key}={}", path.display());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Output root precedence: MAESEG_OUT env var, then the --out flag, then
/// the config's out_dir, then "./runs".
pub fn resolve_out_root(flag: Option<&str>, cfg: &Config) -> PathBuf {
    if let Ok(env) = std::env::var(OUT_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    if let Some(f) = flag {
        return PathBuf::from(f);
    }
    if let Some(c) = &cfg.out_dir {
        return PathBuf::from(c);
    }
    PathBuf::from("runs")
}
