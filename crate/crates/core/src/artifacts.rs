//! On-disk artifacts: CSV matrices, JSON documents, content hashes and
//! per-stage manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Version string recorded in every artifact.
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical (compact, field-ordered) JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    hash_bytes(&serde_json::to_vec(value).expect("artifact values serialize"))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hash_bytes(&bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact values serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Writes a matrix with a header row.
pub fn write_matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    assert_eq!(header.len(), m.ncols(), "header width");
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(header).map_err(|e| Error::format(path, e))?;
    let mut rec = Vec::with_capacity(m.ncols());
    for r in 0..m.nrows() {
        rec.clear();
        rec.extend((0..m.ncols()).map(|c| m[(r, c)].to_string()));
        w.write_record(&rec).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    })?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::format(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        if rec.len() != header.len() {
            return Err(Error::format(path, format!("row {} has {} fields, header has {}", i + 1, rec.len(), header.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: {field:?} is not a number", i + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &values)))
}

pub fn write_columns_csv(path: &Path, names: &[&str], cols: &[&[f64]]) -> Result<()> {
    let n = cols.first().map_or(0, |c| c.len());
    let m = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
    let header: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    write_matrix_csv(path, &header, &m)
}

/// Reads one named column.
pub fn read_column_csv(path: &Path, name: &str) -> Result<Vec<f64>> {
    let (header, m) = read_matrix_csv(path)?;
    let c = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::format(path, format!("no column named {name:?}")))?;
    Ok(m.column(c).iter().copied().collect())
}

/// Record of one completed pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    /// Hash of the configuration fields this stage depends on.
    pub config_hash: String,
    /// Hashes of consumed files, by file name.
    pub inputs: BTreeMap<String, String>,
    /// Hashes of produced files, by file name.
    pub outputs: BTreeMap<String, String>,
}

pub fn manifest_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.manifest.json"))
}

impl Manifest {
    pub fn load(dir: &Path, stage: &str) -> Result<Option<Manifest>> {
        let p = manifest_path(dir, stage);
        if !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&manifest_path(dir, &self.stage), self)
    }

    /// Whether every recorded output still exists with the recorded content.
    pub fn outputs_intact(&self, dir: &Path) -> bool {
        self.outputs
            .iter()
            .all(|(name, h)| hash_file(&dir.join(name)).is_ok_and(|actual| &actual == h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(2, 3, &[0.1, 1e-300, -3.5, std::f64::consts::PI, 7.0, 1.0 / 3.0]);
        let h = vec!["a".to_string(), "b".into(), "c".into()];
        write_matrix_csv(&p, &h, &m).unwrap();
        let (h2, m2) = read_matrix_csv(&p).unwrap();
        assert_eq!(h, h2);
        assert_eq!(m, m2);
        assert_eq!(read_column_csv(&p, "c").unwrap(), vec![-3.5, 1.0 / 3.0]);
    }

    #[test]
    fn malformed_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "a,b\n1,x\n").unwrap();
        assert!(matches!(read_matrix_csv(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
