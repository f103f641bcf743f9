//! Snapshot store: a block of states as little-endian `f64` in row-major
//! order (one state per row), next to a JSON sidecar with the shape and
//! provenance. Reads reproduce the written bits exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STORE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub schema_version: u32,
    /// `[rows, cols]` of the stored block: rows are states.
    pub shape: [usize; 2],
    pub mesh_hash: String,
    pub times: Vec<f64>,
    pub label: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f64"), stem.with_extension("json"))
}

/// Writes the columns of `states` as rows of `<stem>.f64` plus `<stem>.json`.
pub fn write_snapshots(stem: &Path, states: MatRef<'_, f64>, times: &[f64], mesh_hash: &str, label: &str) -> Result<()> {
    if times.len() != states.ncols() {
        return Err(Error::DimensionMismatch { expected: states.ncols(), found: times.len() });
    }
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let (bin, side) = paths(stem);
    let mut w = BufWriter::new(fs::File::create(&bin)?);
    for j in 0..states.ncols() {
        for i in 0..states.nrows() {
            w.write_all(&states[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    let meta = SnapshotMeta {
        schema_version: STORE_SCHEMA_VERSION,
        shape: [states.ncols(), states.nrows()],
        mesh_hash: mesh_hash.to_string(),
        times: times.to_vec(),
        label: label.to_string(),
    };
    fs::write(side, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a block back; the returned matrix has one state per column.
pub fn read_snapshots(stem: &Path) -> Result<(Mat<f64>, SnapshotMeta)> {
    let (bin, side) = paths(stem);
    let meta: SnapshotMeta = serde_json::from_str(&fs::read_to_string(side)?)?;
    if meta.schema_version != STORE_SCHEMA_VERSION {
        return Err(Error::Config(format!("unsupported snapshot schema {}", meta.schema_version)));
    }
    let bytes = fs::read(bin)?;
    let [rows, cols] = meta.shape;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::DimensionMismatch { expected: rows * cols * 8, found: bytes.len() });
    }
    let mut out = Mat::zeros(cols, rows);
    for (k, chunk) in bytes.chunks_exact(8).enumerate() {
        out[(k % cols, k / cols)] = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
    }
    Ok((out, meta))
}

pub fn exists(stem: &Path) -> bool {
    let (bin, side) = paths(stem);
    bin.is_file() && side.is_file()
}
