use std::collections::BTreeMap;
use std::path::Path;

use relext_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(sha256_hex(&bytes))
}

/// Written beside every command's outputs. Holds no timestamps, so reruns
/// produce the same bytes.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub config: Option<String>,
    /// Input path to content digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to content digest.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: None,
            config_hash: None,
            config: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, canonical: String, seed: u64) -> Self {
        self.config_hash = Some(sha256_hex(canonical.as_bytes()));
        self.config = Some(canonical);
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = if path.is_dir() {
            let mut names: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| Error::Io { path: path.into(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
                .collect();
            names.sort();
            let mut h = Sha256::new();
            for p in names {
                h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
                h.update(file_digest(&p)?.as_bytes());
            }
            hex::encode(h.finalize())
        } else {
            file_digest(path)?
        };
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Records an output that must exist and be nonempty.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        let meta = std::fs::metadata(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        if meta.len() == 0 {
            return Err(Error::Config(format!("{} was written empty", path.display())));
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.insert(name, file_digest(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.write_to(&dir.join("manifest.json"))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let path = path.to_path_buf();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}
