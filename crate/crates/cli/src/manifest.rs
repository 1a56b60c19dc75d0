use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Clock readings, kept apart from everything that must reproduce.
#[derive(Debug, Serialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub wall_clock_ms: u128,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub resolved: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timing: Timing,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects artifacts while a command runs.
pub struct Recorder {
    command: String,
    started: SystemTime,
    clock: Instant,
    resolved: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: SystemTime::now(),
            clock: Instant::now(),
            resolved: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn resolved(&mut self, v: impl Serialize) -> Result<()> {
        self.resolved = serde_json::to_value(v)?;
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, role: &str, path: &Path) {
        self.outputs.push((role.to_string(), path.to_path_buf()));
    }

    pub fn write(self, path: &Path) -> Result<()> {
        let hash_all = |list: Vec<(String, PathBuf)>| -> Result<Vec<Artifact>> {
            list.into_iter()
                .map(|(role, p)| {
                    Ok(Artifact {
                        role,
                        sha256: sha256_file(&p)?,
                        path: p.display().to_string(),
                    })
                })
                .collect()
        };
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            resolved: self.resolved,
            seeds: self.seeds,
            inputs: hash_all(self.inputs)?,
            outputs: hash_all(self.outputs)?,
            timing: Timing {
                started_unix_ms: self.started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
                wall_clock_ms: self.clock.elapsed().as_millis(),
            },
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }
}
