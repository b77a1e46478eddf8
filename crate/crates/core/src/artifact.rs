//! Versioned JSON artifact files and content hashing.
//!
//! Every artifact is a JSON object `{"format": ..., "version": ..., "body": ...}`.
//! Floats are written in shortest round-trip form, so save -> load is exact
//! and identical inputs produce byte-identical files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    body: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn save<T: Serialize>(path: &Path, format: &str, version: u32, body: &T) -> Result<()> {
    let env = Envelope {
        format: format.to_string(),
        version,
        body,
    };
    let text = serde_json::to_string(&env)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(
    path: &Path,
    kind: &'static str,
    format: &str,
    version: u32,
) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            kind,
            path: path.to_path_buf(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    if header.format != format {
        return Err(Error::Mismatch(format!(
            "{} holds a '{}' artifact, expected '{format}'",
            path.display(),
            header.format
        )));
    }
    if header.version != version {
        return Err(Error::Mismatch(format!(
            "{} is {format} version {}, this build reads version {version}",
            path.display(),
            header.version
        )));
    }
    let env: Envelope<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    Ok(env.body)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON encoding of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("value serializes to JSON");
    sha256_hex(text.as_bytes())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Thing {
        xs: Vec<f64>,
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        let t = Thing {
            xs: vec![0.1, 1.0 / 3.0, -2.5e-300, 123456.789],
        };
        save(&p, "thing", 1, &t).unwrap();
        let back: Thing = load(&p, "thing", "thing", 1).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn wrong_format_or_version_is_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        save(&p, "thing", 1, &Thing { xs: vec![] }).unwrap();
        let e = load::<Thing>(&p, "thing", "other", 1).unwrap_err();
        assert_eq!(e.category(), "mismatch");
        let e = load::<Thing>(&p, "thing", "thing", 2).unwrap_err();
        assert_eq!(e.category(), "mismatch");
    }

    #[test]
    fn missing_file_is_named() {
        let e = load::<Thing>(Path::new("/nonexistent/x.json"), "checkpoint", "thing", 1)
            .unwrap_err();
        assert_eq!(e.category(), "missing-artifact");
        assert!(e.to_string().contains("/nonexistent/x.json"));
    }
}
