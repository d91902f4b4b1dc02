//! The per-run record and the machine-readable error record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub version: &'static str,
    pub config: Config,
    pub seeds: BTreeMap<&'static str, u64>,
    /// sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, serde_json::Value>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn new(command: &str, config: &Config) -> Self {
        let seeds = BTreeMap::from([
            ("synth", config.synth.seed),
            ("model", config.model.seed),
            ("stage1", config.stage1.seed),
            ("meta", config.meta.seed),
        ]);
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: config.clone(),
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        self.metrics.insert(name.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    /// Runs `f` and records its duration under `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.timings.entry(phase.to_string()).or_default() += t.elapsed().as_secs_f64();
        out
    }
}

/// sha256 of a file, or of a directory's files in sorted order.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "run.json"))
            .collect();
        files.sort();
        for f in files {
            h.update(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
            h.update(std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
        }
    } else {
        h.update(std::fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub command: String,
    pub kind: &'static str,
    pub message: String,
    pub causes: Vec<String>,
    /// Files written before the failure; they are incomplete.
    pub partial_outputs: Vec<String>,
}
