use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_file, sha256_file, write_file};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(root: &Path, rel: &str) -> Result<Self> {
        let full = root.join(rel);
        let bytes = std::fs::metadata(&full).map_err(|e| Error::io(&full, e))?.len();
        Ok(Artifact { path: rel.to_string(), sha256: sha256_file(&full)?, bytes })
    }

    pub fn verify(&self, root: &Path) -> Result<()> {
        let full = root.join(&self.path);
        if !full.exists() {
            return Err(Error::Integrity(format!("artifact {} is missing", self.path)));
        }
        let got = sha256_file(&full)?;
        if got != self.sha256 {
            return Err(Error::Integrity(format!("artifact {} hash {got} != recorded {}", self.path, self.sha256)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    /// Stage-specific counts and metrics.
    pub info: serde_json::Value,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(root: &Path) -> PathBuf {
        root.join(MANIFEST_FILE)
    }

    /// The manifest under `root`, or a fresh one. A stored manifest from a
    /// different configuration is a configuration error: its stages would
    /// not match this run. The output directory itself is not compared.
    pub fn open(root: &Path, config: &RunConfig) -> Result<Self> {
        let p = Self::path(root);
        if !p.exists() {
            return Ok(Self::new(config));
        }
        let m = Self::load(root)?;
        let mut stored = m.config.clone();
        stored.out_dir = config.out_dir.clone();
        if stored != *config {
            return Err(Error::Config(format!(
                "{} belongs to a run with a different configuration; use another output directory",
                root.display()
            )));
        }
        Ok(m)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = Self::path(root);
        serde_json::from_slice(&read_file(&p)?).map_err(|e| Error::format(&p, e.to_string()))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_file(&Self::path(root), &serde_json::to_vec_pretty(self)?)
    }

    pub fn stage(&self, name: &str) -> Result<&StageEntry> {
        self.stages
            .get(name)
            .ok_or_else(|| Error::Config(format!("stage '{name}' has not been run in this output directory")))
    }

    /// Every artifact path with its hash, across stages.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .values()
            .flat_map(|s| s.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone())))
            .collect()
    }
}
