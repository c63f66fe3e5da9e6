//! Run manifests: every subcommand records its resolved configuration,
//! inputs/outputs, and wall-clock bounds beside its primary output. The
//! `resolved` object is accepted back via `--config`, which reproduces the
//! run bit-identically under the same seed and thread profile.

use serde::Serialize;
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub threads: usize,
    pub resolved: Value,
    pub outputs: Vec<String>,
    pub notes: serde_json::Map<String, Value>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub struct ManifestWriter {
    manifest: RunManifest,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl ManifestWriter {
    pub fn new<T: Serialize>(
        subcommand: &str,
        seed: u64,
        threads: usize,
        resolved: &T,
    ) -> anyhow::Result<Self> {
        Ok(ManifestWriter {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                threads,
                resolved: serde_json::to_value(resolved)?,
                outputs: Vec::new(),
                notes: Default::default(),
                started_unix_ms: now_ms(),
                finished_unix_ms: 0,
            },
        })
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn note(&mut self, key: &str, value: Value) {
        self.manifest.notes.insert(key.to_string(), value);
    }

    /// Write `<primary>.manifest.json` next to the primary output.
    pub fn finish(mut self, primary: &Path) -> anyhow::Result<PathBuf> {
        self.manifest.finished_unix_ms = now_ms();
        let path = PathBuf::from(format!("{}.manifest.json", primary.display()));
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(path)
    }
}
