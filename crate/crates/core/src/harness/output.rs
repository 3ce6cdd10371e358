use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RunResult, SweepResult};
use crate::error::Result;
use crate::storage::{format_f64, sha256_file, write_json};

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Columns: `realization,rmse,diverged,diverged_at`; `rmse` is empty for diverged runs.
pub fn write_run_csv(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["realization", "rmse", "diverged", "diverged_at"])?;
    for r in runs {
        w.write_record([r.realization.to_string(), opt_f64(r.rmse), r.diverged.to_string(), opt_usize(r.diverged_at)])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `realization,step,analysis_rmse`.
pub fn write_steps_csv(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["realization", "step", "analysis_rmse"])?;
    for r in runs {
        for (i, e) in r.errors.iter().enumerate() {
            w.write_record([r.realization.to_string(), (i + 1).to_string(), format_f64(*e)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Columns: `method,r,n_x,n_u,alpha_x,alpha_u,realizations,diverged,divergence_fraction,mean_rmse,std_rmse,band_2sd`.
pub fn write_sweep_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "method",
        "r",
        "n_x",
        "n_u",
        "alpha_x",
        "alpha_u",
        "realizations",
        "diverged",
        "divergence_fraction",
        "mean_rmse",
        "std_rmse",
        "band_2sd",
    ])?;
    for row in &sweep.rows {
        w.write_record([
            row.method.label().to_string(),
            opt_usize(row.r),
            row.n_x.to_string(),
            row.n_u.to_string(),
            format_f64(row.alpha_x),
            format_f64(row.alpha_u),
            row.realizations.to_string(),
            row.diverged.to_string(),
            format_f64(row.divergence_fraction()),
            format_f64(row.mean_rmse),
            format_f64(row.std_rmse),
            format_f64(row.band()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `method,r,n_x,n_u,alpha_x,realization,rmse,diverged,diverged_at`.
pub fn write_sweep_runs_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "r", "n_x", "n_u", "alpha_x", "realization", "rmse", "diverged", "diverged_at"])?;
    for row in &sweep.rows {
        for run in &row.runs {
            w.write_record([
                row.method.label().to_string(),
                opt_usize(row.r),
                row.n_x.to_string(),
                row.n_u.to_string(),
                format_f64(row.alpha_x),
                run.realization.to_string(),
                opt_f64(run.rmse),
                run.diverged.to_string(),
                opt_usize(run.diverged_at),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl ArtifactRecord {
    pub fn hash(path: &Path) -> Result<Self> {
        Ok(Self { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }
}

/// Everything needed to regenerate a set of CSV outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<ArtifactRecord>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds,
            artifacts: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn add_artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(ArtifactRecord::hash(path)?);
        Ok(())
    }

    /// `results.csv` gets `results.manifest.json` next to it.
    pub fn path_for(csv: &Path) -> PathBuf {
        csv.with_extension("manifest.json")
    }

    pub fn write_for(&self, csv: &Path) -> Result<PathBuf> {
        let path = Self::path_for(csv);
        write_json(&path, self)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(k: usize, rmse: Option<f64>) -> RunResult {
        RunResult { realization: k, rmse, errors: vec![0.5, 0.25], diverged: rmse.is_none(), diverged_at: rmse.map_or(Some(3), |_| None), wall_time_s: 1.0 }
    }

    #[test]
    fn run_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.csv");
        write_run_csv(&p, &[run(0, Some(0.1)), run(1, None)]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "realization,rmse,diverged,diverged_at");
        assert_eq!(lines[1], "0,1.0000000000000001e-1,false,");
        assert_eq!(lines[2], "1,,true,3");
        let steps = dir.path().join("steps.csv");
        write_steps_csv(&steps, &[run(0, Some(0.1))]).unwrap();
        assert_eq!(fs::read_to_string(&steps).unwrap().lines().count(), 3);
    }

    #[test]
    fn manifest_sits_next_to_the_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("out.csv");
        fs::write(&csv, "a\n").unwrap();
        let mut m = RunManifest::new("run", &serde_json::json!({"n_x": 32}), vec![7]).unwrap();
        m.add_artifact(&csv).unwrap();
        let path = m.write_for(&csv).unwrap();
        assert_eq!(path.file_name().unwrap(), "out.manifest.json");
        let back: RunManifest = crate::storage::read_json(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.artifacts[0].sha256.len(), 64);
    }
}
