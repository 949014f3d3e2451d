//! Per-command record of inputs, outputs and settings.

use std::path::{Path, PathBuf};

use serde::Serialize;
use vstain::error::{Error, Result};

#[derive(Debug, Serialize)]
struct FileEntry {
    path: PathBuf,
    bytes: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct Provenance {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    seed: u64,
    workers: usize,
    device: String,
    config: serde_json::Value,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn entry(p: &Path) -> FileEntry {
    FileEntry { path: p.to_path_buf(), bytes: std::fs::metadata(p).ok().map(|m| m.len()) }
}

impl Provenance {
    pub fn new(command: &str, seed: u64, workers: usize, device: &str, config: serde_json::Value) -> Self {
        Provenance {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            workers,
            device: device.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(entry(p));
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(entry(p));
    }

    /// Writes `provenance.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("provenance.json");
        let text = serde_json::to_string_pretty(self).expect("provenance serializes");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
