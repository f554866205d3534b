//! Run manifests: the resolved config, timestamps and a hashed inventory of
//! every artifact a run wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub code_version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: Option<usize>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub pass: bool,
    pub files: Vec<FileEntry>,
}

/// Writes artifacts into one directory and records their hashes.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
    started: f64,
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), started: now_unix() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        if name == MANIFEST_NAME || name.contains('/') {
            return Err(Error::InvalidParameters(format!("bad artifact name {name}")));
        }
        std::fs::write(self.dir.join(name), bytes)?;
        self.files.retain(|f| f.name != name);
        self.files.push(FileEntry { name: name.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn write_str(&mut self, name: &str, text: &str) -> Result<()> {
        self.write(name, text.as_bytes())
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn finish(self, subcommand: &str, config: serde_json::Value, seed: u64, pass: bool) -> Result<RunManifest> {
        let m = RunManifest {
            subcommand: subcommand.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            threads: crate::stats::thread_cap(),
            started_unix: self.started,
            finished_unix: now_unix(),
            pass,
            files: self.files,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(self.dir.join(MANIFEST_NAME), text + "\n")?;
        Ok(m)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

/// Re-hashes every listed artifact; returns the names that are missing or changed.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let m = read_manifest(dir)?;
    let mut bad = Vec::new();
    for f in &m.files {
        match std::fs::read(dir.join(&f.name)) {
            Ok(b) if b.len() as u64 == f.bytes && sha256_hex(&b) == f.sha256 => {}
            _ => bad.push(f.name.clone()),
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("obswave-manifest-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn tampering_is_detected() {
        let d = tmp("tamper");
        let mut w = ArtifactWriter::create(&d).unwrap();
        w.write_str("a.csv", "x,y\n1,2\n").unwrap();
        w.write_str("b.txt", "ok=true\n").unwrap();
        w.finish("solve", serde_json::json!({"k": 1}), 3, true).unwrap();
        assert!(verify_manifest(&d).unwrap().is_empty());
        std::fs::write(d.join("a.csv"), "x,y\n1,3\n").unwrap();
        assert_eq!(verify_manifest(&d).unwrap(), vec!["a.csv".to_string()]);
        std::fs::remove_file(d.join("b.txt")).unwrap();
        assert_eq!(verify_manifest(&d).unwrap().len(), 2);
        let m = read_manifest(&d).unwrap();
        assert_eq!(m.seed, 3);
        let _ = std::fs::remove_dir_all(&d);
    }
}
