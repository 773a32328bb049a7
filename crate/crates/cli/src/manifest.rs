use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use evdl_core::{Error, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

/// Record of one successful run, written to `<primary output>.manifest.json`.
pub struct RunManifest {
    command: &'static str,
    started: Instant,
    config: Map<String, Value>,
    seeds: Map<String, Value>,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<PathBuf>,
}

/// Hex SHA-256 of a file, or of `name:hash` lines over a directory's files
/// in name order.
pub fn sha256_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut names: Vec<OsString> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.file_name()))
            .collect();
        names.sort();
        let mut hasher = Sha256::new();
        for name in names {
            let child = path.join(&name);
            if child.is_file() {
                hasher.update(format!("{}:{}\n", name.to_string_lossy(), sha256_path(&child)?));
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(format!("{:x}", Sha256::digest(&bytes)))
    }
}

impl RunManifest {
    pub fn new(command: &'static str) -> Self {
        RunManifest {
            command,
            started: Instant::now(),
            config: Map::new(),
            seeds: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.config.insert(key.to_string(), value.into());
        self
    }

    pub fn seed(&mut self, key: &str, value: u64) -> &mut Self {
        self.seeds.insert(key.to_string(), value.into());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let hash = sha256_path(path)?;
        self.inputs.push((path.to_path_buf(), hash));
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn has_outputs(&self) -> bool {
        !self.outputs.is_empty()
    }

    /// Writes next to the first output and returns the manifest path.
    pub fn write(&self) -> Result<PathBuf> {
        let primary = self
            .outputs
            .first()
            .ok_or_else(|| Error::Config("run produced no outputs".into()))?;
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let doc = json!({
            "tool": "evdl",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs.iter().map(|(p, h)| json!({"path": p, "sha256": h})).collect::<Vec<_>>(),
            "outputs": self.outputs,
            "duration_secs": self.started.elapsed().as_secs_f64(),
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
