use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::formats::{read_file, write_file};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Written last by every command. Timestamps appear only here, so every
/// other output is byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub files: Vec<FileEntry>,
}

pub fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn begin(command: &str, config_hash: String, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config_hash,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at: now_rfc3339(),
            finished_at: String::new(),
            files: Vec::new(),
        }
    }

    /// Records `rel` (relative to `dir`) with its digest, reading it back
    /// from disk so the entry reflects what was actually written.
    pub fn add(&mut self, dir: &Path, rel: &str) -> CliResult<()> {
        let bytes = read_file(&dir.join(rel))?;
        self.files.retain(|f| f.path != rel);
        self.files.push(FileEntry { path: rel.into(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> CliResult<()> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        self.finished_at = now_rfc3339();
        let text = serde_json::to_string_pretty(&self).expect("serializable");
        write_file(&dir.join(MANIFEST_NAME), text.as_bytes())
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_NAME);
        serde_json::from_slice(&read_file(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Files whose current digest differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> CliResult<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.files {
            if sha256_hex(&read_file(&dir.join(&f.path))?) != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_and_verifies_digests() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.bin"), b"abc").unwrap();
        let mut m = RunManifest::begin("test", "h".into(), 7);
        m.add(dir.path(), "x.bin").unwrap();
        m.finish(dir.path()).unwrap();
        let m = RunManifest::load(dir.path()).unwrap();
        assert_eq!(m.files[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert!(chrono::DateTime::parse_from_rfc3339(&m.started_at).is_ok());
        assert!(m.verify(dir.path()).unwrap().is_empty());
        std::fs::write(dir.path().join("x.bin"), b"abd").unwrap();
        assert_eq!(m.verify(dir.path()).unwrap(), vec!["x.bin".to_string()]);
    }
}
