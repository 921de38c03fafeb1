//! Run manifests and the output directory they describe.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use scar_core::rng::hex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Full argument vector, program name excluded.
    pub command: Vec<String>,
    /// Hash of the effective configuration (file keys plus flag overrides).
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub files: Vec<FileEntry>,
    /// Parameter checksums and other end-of-run digests.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Collects every file a command writes, then seals them into a manifest.
pub struct Outputs {
    dir: PathBuf,
    started: u64,
    files: Vec<FileEntry>,
    pub checksums: BTreeMap<String, String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            started: now_ms(),
            files: Vec::new(),
            checksums: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes (overwriting) `name` under the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Writes `<name>` as the manifest of this run and returns it.
    pub fn seal(self, name: &str, command: &[String], config_hash: String, seed: u64) -> Result<RunManifest, CliError> {
        let m = RunManifest {
            command: command.to_vec(),
            config_hash,
            seed,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            files: self.files,
            checksums: self.checksums,
        };
        let path = self.dir.join(name);
        let mut s = serde_json::to_string_pretty(&m)?;
        s.push('\n');
        fs::write(&path, s).map_err(io_err(&path))?;
        Ok(m)
    }
}
