//! Atomic file output and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct ConfigRecord {
    /// Effective configuration, in config-file syntax.
    pub text: String,
    pub sha256: String,
}

/// Everything needed to regenerate a run's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    /// Command line, without the program name.
    pub args: Vec<String>,
    pub config: Option<ConfigRecord>,
    pub master_seed: Option<u64>,
    pub seed_source: Option<&'static str>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &'static str) -> Self {
        Self {
            tool: "visitsim",
            version: visitsim_core::VERSION,
            command,
            args: std::env::args().skip(1).collect(),
            config: None,
            master_seed: None,
            seed_source: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config_text(&mut self, text: String) {
        let sha256 = sha256_hex(text.as_bytes());
        self.config = Some(ConfigRecord { text, sha256 });
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Writes one output atomically and records its digest.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes)?;
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Saves the manifest to `path`.
    pub fn finish(self, path: &Path) -> Result<(), CliError> {
        let mut json = serde_json::to_string_pretty(&self).expect("manifest serialises");
        json.push('\n');
        write_atomic(path, json.as_bytes())
    }
}

/// `panel.csv` gets `panel.csv.manifest.json`.
pub fn manifest_beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}
