//! `manifest.json`: the configuration snapshot, and per stage its status, wall clock
//! and the sha256 of every file it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{hex_sha256, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::io::io_err;

pub const MANIFEST_FILE: &str = "manifest.json";

pub const SEED_RULE: &str = "ChaCha12 seeded from the master seed; stream id = (purpose << 32) | index; \
purposes: truth_noise=1 (index 0 noise, 1 initial anomaly), observation_noise=2, initial_ensemble=3 (member), \
forecast_noise=4 (member), perturbed_observation=5 ((cycle << 16) | member), agent_init=6 (agent), \
agent_shuffle=7 ((agent << 16) | epoch)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// `complete` or `incomplete`.
    pub status: String,
    pub config_hash: String,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed_rule: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            config_hash: cfg.hash(),
            seed_rule: SEED_RULE.to_string(),
            stages: BTreeMap::new(),
        }
    }

    /// Loads the manifest in `out`, keeping earlier stages but refreshing the snapshot
    /// to `cfg`.
    pub fn load_or_new(out: &Path, cfg: &ExperimentConfig) -> CliResult<Self> {
        let path = out.join(MANIFEST_FILE);
        let mut m = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?
        } else {
            Self::new(cfg)
        };
        let fresh = Self::new(cfg);
        m.config = fresh.config;
        m.config_hash = fresh.config_hash;
        m.seed_rule = fresh.seed_rule;
        Ok(m)
    }

    pub fn write(&self, out: &Path) -> CliResult<()> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

/// Bookkeeping handed to a stage body.
pub struct StageContext {
    pub out: PathBuf,
    artifacts: Vec<PathBuf>,
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl StageContext {
    /// Registers a file (relative to the output directory) for hashing.
    pub fn produced(&mut self, path: &Path) {
        if !self.artifacts.iter().any(|p| p == path) {
            self.artifacts.push(path.to_path_buf());
        }
    }

    pub fn note(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.notes.insert(key.to_string(), value.into());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn hash_file(out: &Path, path: &Path) -> Option<Artifact> {
    let bytes = std::fs::read(path).ok()?;
    let rel = path.strip_prefix(out).unwrap_or(path);
    Some(Artifact {
        path: rel.to_string_lossy().replace('\\', "/"),
        sha256: hex_sha256(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Runs `body` as stage `name` and records it in the manifest, hashing whatever was
/// produced. A failed stage is recorded as incomplete before the error propagates.
pub fn run_stage<T>(
    out: &Path,
    cfg: &ExperimentConfig,
    name: &str,
    body: impl FnOnce(&mut StageContext) -> CliResult<T>,
) -> CliResult<T> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut manifest = RunManifest::load_or_new(out, cfg)?;
    let mut ctx = StageContext {
        out: out.to_path_buf(),
        artifacts: Vec::new(),
        notes: BTreeMap::new(),
    };
    let start = Instant::now();
    let result = body(&mut ctx);
    let record = StageRecord {
        status: if result.is_ok() { "complete" } else { "incomplete" }.to_string(),
        config_hash: cfg.hash(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        artifacts: ctx.artifacts.iter().filter_map(|p| hash_file(out, p)).collect(),
        error: result.as_ref().err().map(|e| e.to_string()),
        notes: ctx.notes,
    };
    manifest.stages.insert(name.to_string(), record);
    manifest.write(out)?;
    result
}
