//! JSON checkpoint I/O and content hashing.
//!
//! Checkpoints are single JSON documents carrying a `kind` tag, the
//! creating seed, module-specific metadata, and the named-parameter
//! map. The manifest stores a SHA-256 of every artifact so stages can
//! prove their inputs are the ones they were run against.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// Serialize a checkpoint (or any artifact) as one JSON document.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, value).map_err(|e| LabError::json(path, e))?;
    out.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    out.flush().map_err(|e| LabError::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| LabError::json(path, e))
}

/// Reject a checkpoint whose `kind` tag does not match the loader.
pub fn ensure_kind(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(LabError::CheckpointKind {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(|e| LabError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Hex SHA-256 of a byte string (used for config snapshots).
pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use tempfile::tempdir;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Demo {
        kind: String,
        values: Vec<f64>,
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("demo.json");
        let demo = Demo {
            kind: "demo".into(),
            values: vec![1.0, -2.25, 1e-17],
        };
        save_json(&path, &demo).unwrap();
        let back: Demo = load_json(&path).unwrap();
        assert_eq!(back, demo);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let err = ensure_kind(Path::new("x.json"), "classifier", "encoder").unwrap_err();
        assert!(err.to_string().contains("encoder"));
    }

    #[test]
    fn sha256_matches_known_vector() {
        // SHA-256 of the empty string is a published constant.
        assert_eq!(
            sha256_bytes(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let dir = tempdir().unwrap();
        let path = dir.path().join("abc.txt");
        std::fs::write(&path, "abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
