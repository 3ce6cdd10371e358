//! Matrix files (headerless CSV, 17 significant digits) with JSON sidecars.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `m` row by row.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|&v| format_f64(v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for rec in r.records() {
        let rec = rec?;
        match ncols {
            None => ncols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Format { path: path.into(), msg: format!("row {nrows} has {} columns, expected {c}", rec.len()) })
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                path: path.into(),
                msg: format!("bad number {field:?} in row {nrows}"),
            })?;
            data.push(v);
        }
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols.unwrap_or(0), &data))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub n: usize,
    #[serde(rename = "F")]
    pub forcing: f64,
    pub dt: f64,
    pub spacing: f64,
    pub seed: u64,
    pub count: usize,
    pub burn_in: f64,
}

/// Stores a snapshot set: rows are snapshots, plus `<file>.json` metadata.
pub fn save_snapshots(path: &Path, traj: &Trajectory, meta: &SnapshotMeta) -> Result<()> {
    write_matrix_csv(path, &traj.states.transpose())?;
    write_json(&sidecar_path(path), meta)
}

pub fn load_snapshots(path: &Path) -> Result<(Trajectory, SnapshotMeta)> {
    let meta: SnapshotMeta = read_json(&sidecar_path(path))?;
    let rows = read_matrix_csv(path)?;
    if rows.nrows() != meta.count || rows.ncols() != meta.n {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("expected {}x{}, found {}x{}", meta.count, meta.n, rows.nrows(), rows.ncols()),
        });
    }
    let times = (0..meta.count).map(|j| meta.burn_in + j as f64 * meta.spacing).collect();
    Ok((Trajectory::new(times, rows.transpose())?, meta))
}
