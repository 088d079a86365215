//! Line-record files and atomic output.
//!
//! All stage artifacts are UTF-8 text with one JSON object per line. Writers
//! go through a temporary file in the destination directory followed by a
//! rename, so a reader never observes a truncated artifact.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl RecordError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, RecordError> {
    let bytes = fs::read(path).map_err(|e| RecordError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RecordError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| RecordError::io(&dir, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".partial-")
        .tempfile_in(&dir)
        .map_err(|e| RecordError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| RecordError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| RecordError::io(path, e))?;
    tmp.persist(path).map_err(|e| RecordError::io(path, e.error))?;
    Ok(())
}

/// Serializes each item as one compact JSON line.
pub fn to_lines<T: Serialize>(items: &[T]) -> Result<Vec<u8>, RecordError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RecordError> {
    write_atomic(path, &to_lines(items)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RecordError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RecordError> {
    let bytes = fs::read(path).map_err(|e| RecordError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| RecordError::Parse {
        path: path.to_path_buf(),
        line: 1,
        source,
    })
}

/// Reads a record stream, skipping blank lines.
pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let file = fs::File::open(path).map_err(|e| RecordError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RecordError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| RecordError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: u32,
        b: String,
    }

    #[test]
    fn lines_round_trip_and_no_temp_left() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![Row { a: 1, b: "x".into() }, Row { a: 2, b: "y".into() }];
        write_lines(&path, &rows).unwrap();
        let back: Vec<Row> = read_lines(&path).unwrap();
        assert_eq!(back, rows);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"a\":1,\"b\":\"x\"}\nnot json\n").unwrap();
        let err = read_lines::<Row>(&path).unwrap_err();
        assert!(matches!(err, RecordError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
