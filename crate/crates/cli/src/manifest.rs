//! `manifest.json`: what each command read, wrote and how long it took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use neuralign::params::{sha256_hex, write_atomic};
use neuralign::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    /// Resolved configuration of the latest command.
    pub config: serde_json::Value,
    pub commands: BTreeMap<String, CommandRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CommandRecord {
    /// File path → SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    pub checkpoints: Vec<String>,
    pub reports: Vec<String>,
    /// Model and provider fingerprints.
    pub fingerprints: BTreeMap<String, String>,
    /// Wall-clock seconds per phase.
    pub timings_s: BTreeMap<String, f64>,
    pub finished_unix: u64,
}

impl CommandRecord {
    pub fn hash_inputs(&mut self, root: &Path) -> Result<()> {
        self.inputs.extend(hash_tree(root)?);
        Ok(())
    }

    pub fn checkpoint(&mut self, p: &Path) {
        self.checkpoints.push(p.display().to_string());
    }

    pub fn report(&mut self, p: &Path) {
        self.reports.push(p.display().to_string());
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self);
        *self.timings_s.entry(phase.to_string()).or_default() += t0.elapsed().as_secs_f64();
        out
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 of every file under `root` (or of `root` itself).
pub fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    if root.is_dir() {
        collect(root, &mut files)?;
    } else if root.exists() {
        files.push(root.to_path_buf());
    }
    files
        .into_iter()
        .map(|p| Ok((p.display().to_string(), sha256_hex(&std::fs::read(&p)?))))
        .collect()
}

/// Replaces the entry of `command` in `<out>/manifest.json`, keeping the
/// others, and writes the file atomically.
pub fn record(out: &Path, command: &str, config: serde_json::Value, mut rec: CommandRecord) -> Result<PathBuf> {
    let path = out.join(MANIFEST_FILE);
    let mut m: RunManifest = match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => RunManifest::default(),
    };
    m.version = env!("CARGO_PKG_VERSION").to_string();
    m.config = config;
    rec.finished_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    m.commands.insert(command.to_string(), rec);
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::create_dir_all(out)?;
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
