//! `manifest.json`: everything needed to re-run a command. No timestamps,
//! so identical runs leave identical directories.

use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::error::{Error, Result};
use crate::io::write_json;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub bytes: u64,
    /// FNV-1a 64 of the file contents, hex.
    pub fnv64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub command: String,
    pub out: PathBuf,
    pub settings: Settings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, out: &Path, settings: &Settings) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: corefdiffs_core::VERSION.into(),
            command: command.into(),
            out: out.into(),
            settings: settings.clone(),
            config_hash: None,
            seed: None,
            provider: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        let mut h = FnvHasher::default();
        h.write(&bytes);
        self.inputs.push(InputDigest {
            path: path.into(),
            bytes: bytes.len() as u64,
            fnv64: format!("{:016x}", h.finish()),
        });
        Ok(())
    }

    /// Lists the files under `out` and writes the manifest there.
    pub fn write(mut self) -> Result<()> {
        let mut outputs = Vec::new();
        list_files(&self.out, Path::new(""), &mut outputs)?;
        outputs.retain(|p| p != Path::new(FILE_NAME));
        outputs.sort();
        self.outputs = outputs;
        write_json(&self.out.join(FILE_NAME), &self)
    }
}

fn list_files(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let dir = root.join(rel);
    for entry in fs::read_dir(&dir).map_err(Error::io(&dir))? {
        let entry = entry.map_err(Error::io(&dir))?;
        let rel = rel.join(entry.file_name());
        if entry.file_type().map_err(Error::io(&dir))?.is_dir() {
            list_files(root, &rel, out)?;
        } else {
            out.push(rel);
        }
    }
    Ok(())
}
