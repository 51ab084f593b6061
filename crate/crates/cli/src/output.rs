use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}

#[derive(Debug, Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

/// Tracks files written by one command and emits the run manifest.
pub struct RunOutputs {
    dir: PathBuf,
    files: Vec<OutputEntry>,
    started: Instant,
}

impl RunOutputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(RunOutputs { dir: dir.to_path_buf(), files: Vec::new(), started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file that a library writer already produced.
    pub fn record(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::Runtime(format!("cannot read back {}: {e}", path.display())))?;
        self.files.push(OutputEntry { file: name.to_string(), sha256: sha256_hex(&bytes) });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        std::fs::write(&path, to_json(value)).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.record(name)
    }

    /// Writes `manifest.json`: the resolved configuration with its hash, the
    /// seed, tool version, output hashes and wall time.
    pub fn finish(self, command: &str, config: &Value, seed: u64) -> Result<PathBuf, CliError> {
        let config_text = serde_json::to_string(config).expect("config serializes");
        let manifest = serde_json::json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": seed,
            "threads": rayon::current_num_threads(),
            "config_sha256": sha256_hex(config_text.as_bytes()),
            "config": config,
            "outputs": self.files,
            "wall_time_seconds": self.started.elapsed().as_secs_f64(),
        });
        let path = self.path("manifest.json");
        std::fs::write(&path, to_json(&manifest)).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
