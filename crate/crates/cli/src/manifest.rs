//! Run manifests: what was run, with which settings, and what it produced.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dcgmm::io::write_atomic;
use dcgmm::Result;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Collects outputs in memory so that nothing is written until the command
/// has succeeded.
pub struct Outputs {
    started: Instant,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn new() -> Self {
        Outputs {
            started: Instant::now(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    /// Writes every output and then the manifest, each atomically.
    pub fn commit(
        self,
        manifest_path: &Path,
        command: &str,
        config: Value,
        seed: u64,
        inputs: Vec<PathBuf>,
    ) -> Result<()> {
        let mut artifacts = Vec::with_capacity(self.files.len());
        for (path, bytes) in &self.files {
            write_atomic(path, bytes)?;
            artifacts.push(Artifact {
                path: path.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs,
            outputs: artifacts,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        write_atomic(manifest_path, &json)
    }
}

/// `<path>.manifest.json` unless given explicitly.
pub fn manifest_path(explicit: Option<&Path>, primary: &Path) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sibling(primary, "manifest.json"))
}

/// `<path>.<suffix>` in the same directory.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}
