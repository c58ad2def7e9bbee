//! Run manifests: what was run, on which inputs, and digests of what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Arguments after the binary name, verbatim.
    pub args: Vec<String>,
    pub seed: u64,
    /// Digest of the scenario source text, when the command reads one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    pub versions: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn digest_file(path: &Path, label: &str) -> Result<FileDigest, Error> {
    Ok(FileDigest { path: label.into(), sha256: sha256_hex(&fs::read(path)?) })
}

pub fn versions() -> BTreeMap<String, String> {
    let mut v = BTreeMap::new();
    v.insert("imf".into(), env!("CARGO_PKG_VERSION").into());
    v.insert("checkpoint_format".into(), crate::checkpoint::FORMAT_VERSION.to_string());
    v.insert("telemetry_schema".into(), crate::gateway::SCHEMA_VERSION.to_string());
    v
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            args,
            seed,
            config_sha256: None,
            versions: versions(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records digests of `names` under `dir`, in the given order.
    pub fn add_outputs(&mut self, dir: &Path, names: &[String]) -> Result<(), Error> {
        for n in names {
            self.outputs.push(digest_file(&dir.join(n), n)?);
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, Error> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
