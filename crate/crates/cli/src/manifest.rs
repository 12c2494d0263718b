//! Checksummed index of every artifact in a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tica_core::matrix::{decode_bin, encode_bin};
use tica_core::Matrix;

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Relative path (always `/`-separated) to SHA-256 hex digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub artifacts: BTreeMap<String, String>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            artifacts: BTreeMap::new(),
        }
    }
}

pub fn parse_manifest(text: &str) -> std::result::Result<Manifest, String> {
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if manifest.version != MANIFEST_VERSION {
        return Err(format!("unsupported manifest version {}", manifest.version));
    }
    if let Some(bad) = manifest
        .artifacts
        .iter()
        .find(|(path, digest)| !is_relative(path) || digest.len() != 64 || hex::decode(digest).is_err())
    {
        return Err(format!("bad manifest entry {:?}", bad.0));
    }
    Ok(manifest)
}

fn is_relative(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && path.split('/').all(|part| !part.is_empty() && part != "." && part != "..")
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        parse_manifest(&text).map_err(|e| CliError::Missing {
            path,
            reason: format!("unreadable manifest: {e}"),
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn insert(&mut self, rel: impl Into<String>, digest: String) {
        self.artifacts.insert(rel.into(), digest);
    }

    /// Hashes an existing file and records it.
    pub fn record(&mut self, root: &Path, rel: &str) -> Result<()> {
        let path = root.join(rel);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.insert(rel, sha256_hex(&bytes));
        Ok(())
    }

    /// Drops every entry under a directory prefix.
    pub fn forget_prefix(&mut self, prefix: &str) {
        let dir = format!("{}/", prefix.trim_end_matches('/'));
        self.artifacts.retain(|path, _| !path.starts_with(&dir));
    }

    pub fn contains(&self, rel: &str) -> bool {
        self.artifacts.contains_key(rel)
    }

    /// Reads an artifact, refusing files that are unlisted or altered.
    pub fn verify(&self, root: &Path, rel: &str) -> Result<Vec<u8>> {
        let path = root.join(rel);
        let expected = self.artifacts.get(rel).ok_or_else(|| CliError::Missing {
            path: path.clone(),
            reason: "not listed in manifest.json".into(),
        })?;
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if &sha256_hex(&bytes) != expected {
            return Err(CliError::Tampered(path));
        }
        Ok(bytes)
    }

    pub fn verify_matrix(&self, root: &Path, rel: &str) -> Result<Matrix> {
        Ok(decode_bin(&self.verify(root, rel)?)?)
    }
}

/// Writes bytes under `root`, creating parent directories, and returns the
/// manifest entry.
pub fn write_artifact(root: &Path, rel: &str, bytes: &[u8]) -> Result<(String, String)> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok((rel.to_string(), sha256_hex(bytes)))
}

pub fn write_matrix_artifact(root: &Path, rel: &str, m: &Matrix) -> Result<(String, String)> {
    write_artifact(root, rel, &encode_bin(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_escaping_paths() {
        let digest = "0".repeat(64);
        for path in ["../x", "/etc/passwd", "a//b", "a/./b", ""] {
            let text = format!(r#"{{"version":1,"artifacts":{{"{path}":"{digest}"}}}}"#);
            assert!(parse_manifest(&text).is_err(), "{path}");
        }
        let ok = format!(r#"{{"version":1,"artifacts":{{"fits/a.bin":"{digest}"}}}}"#);
        assert!(parse_manifest(&ok).is_ok());
    }

    #[test]
    fn detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::default();
        let (rel, digest) = write_artifact(dir.path(), "a/b.txt", b"hello").unwrap();
        manifest.insert(rel, digest);
        assert_eq!(manifest.verify(dir.path(), "a/b.txt").unwrap(), b"hello");
        fs::write(dir.path().join("a/b.txt"), b"hellO").unwrap();
        assert!(matches!(manifest.verify(dir.path(), "a/b.txt"), Err(CliError::Tampered(_))));
        assert!(matches!(manifest.verify(dir.path(), "c.txt"), Err(CliError::Missing { .. })));
    }
}
