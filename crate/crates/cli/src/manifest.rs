use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use oopsim::{Error, Result};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let data = fs::read(path)?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&data)),
        bytes: data.len() as u64,
    })
}

/// Provenance record written next to every command's outputs. It holds no
/// timestamps or thread counts, so identical runs give identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub options: BTreeMap<String, String>,
    pub config: Option<FileDigest>,
    pub inputs: BTreeMap<String, FileDigest>,
    /// Keyed by file name inside the output directory.
    pub outputs: BTreeMap<String, FileDigest>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest {
            tool: "oopsim",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            options: BTreeMap::new(),
            config: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn option(&mut self, name: &str, value: impl ToString) {
        self.options.insert(name.to_string(), value.to_string());
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_string(), digest(path)?);
        Ok(())
    }

    /// Hashes the listed files and writes `manifest_<command>.json`.
    pub fn finish(mut self, out_dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
        for f in files {
            let mut d = digest(f)?;
            let name = f.file_name().map_or_else(|| d.path.clone(), |n| n.to_string_lossy().into_owned());
            d.path = name.clone();
            self.outputs.insert(name, d);
        }
        let path = out_dir.join(format!("manifest_{}.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(path)
    }
}
