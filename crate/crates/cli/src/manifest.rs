//! Output directory bookkeeping and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Schema tag for every CSV written by the tool.
pub const CSV_SCHEMA: &str = "fvlab-csv/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub master_seed: u64,
    pub seed_rule: String,
    pub threads: usize,
    pub csv_schema: String,
    pub params: Value,
    pub started: String,
    pub finished: String,
    pub exit_code: i32,
    pub summary: Value,
    pub outputs: Vec<OutputFile>,
}

/// Collects output files written under one directory.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<OutputFile>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_owned(), files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` through `fill` and records its hash.
    pub fn write<F>(&mut self, name: &str, fill: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        fs::File::create(self.path(name))?.write_all(&buf)?;
        self.files.push(OutputFile {
            file: name.to_owned(),
            sha256: hex::encode(Sha256::digest(&buf)),
            bytes: buf.len() as u64,
        });
        Ok(())
    }

    pub fn into_files(self) -> Vec<OutputFile> {
        self.files
    }
}

pub fn write_manifest(root: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Run(e.to_string()))?;
    fs::write(root.join("manifest.json"), text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_match_file_contents() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write("a.csv", |b| {
            b.extend_from_slice(b"abc");
            Ok(())
        })
        .unwrap();
        let files = out.into_files();
        assert_eq!(files[0].bytes, 3);
        assert_eq!(files[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), b"abc");
    }
}
