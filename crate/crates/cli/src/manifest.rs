//! Run bookkeeping: every invocation leaves a `manifest.json` in its output
//! directory, whether it succeeded or not.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Ok,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    /// Recorded as each input is opened, before it is parsed.
    pub inputs: Vec<FileDigest>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<FileDigest>,
    pub status: Status,
    pub exit_code: Option<u8>,
    pub error: Option<String>,
    /// Milliseconds since the Unix epoch; omitted under `--deterministic`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_unix_ms: Option<u128>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_unix_ms: Option<u128>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory plus the manifest being assembled for this run.
pub struct Run {
    pub out_dir: PathBuf,
    pub deterministic: bool,
    manifest: RunManifest,
}

impl Run {
    pub fn new(command: &str, config: serde_json::Value, out_dir: PathBuf, deterministic: bool) -> Run {
        Run {
            out_dir,
            deterministic,
            manifest: RunManifest {
                tool: "fairscreen",
                version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                config,
                inputs: Vec::new(),
                seeds: Vec::new(),
                outputs: Vec::new(),
                status: Status::Running,
                exit_code: None,
                error: None,
                started_unix_ms: (!deterministic).then(now_ms),
                finished_unix_ms: None,
            },
        }
    }

    /// Reads an input file whole and records its digest. Callers parse the
    /// returned bytes, so the digest always covers what was processed.
    pub fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.record_input(path, &bytes);
        Ok(bytes)
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    pub fn seeds(&mut self, seeds: &[u64]) {
        self.manifest.seeds = seeds.to_vec();
    }

    /// Writes `bytes` to `out_dir/name`, creating parent directories.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record_output(name, bytes);
        Ok(path)
    }

    pub fn record_output(&mut self, name: &str, bytes: &[u8]) {
        self.manifest.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    /// Registers a file some library call already wrote under `out_dir`.
    pub fn adopt(&mut self, name: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        self.record_output(name, &bytes);
        Ok(())
    }

    pub fn finish(mut self, outcome: std::result::Result<(), (u8, String)>) -> Result<()> {
        match outcome {
            Ok(()) => {
                self.manifest.status = Status::Ok;
                self.manifest.exit_code = Some(0);
            }
            Err((code, msg)) => {
                self.manifest.status = Status::Failed;
                self.manifest.exit_code = Some(code);
                self.manifest.error = Some(msg);
            }
        }
        if !self.deterministic {
            self.manifest.finished_unix_ms = Some(now_ms());
        }
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let mut json = serde_json::to_vec_pretty(&self.manifest)?;
        json.push(b'\n');
        let path = self.out_dir.join(MANIFEST_NAME);
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
    }
}
