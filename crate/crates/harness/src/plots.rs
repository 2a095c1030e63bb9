//! CSV series behind the tracking, constraint and timing plots.
//!
//! Every file has a header row and one row per episode record:
//!
//! | file             | columns                                                   |
//! |------------------|-----------------------------------------------------------|
//! | `tracking.csv`   | `t` (s), `position_error` (m), `orientation_error` (rad), `clearance` (m) |
//! | `constraint.csv` | `t` (s), `h_norm`, `h_exec_max` (empty on the final row)  |
//! | `timing.csv`     | `t` (s), `plan_ms`, `exec_ms` (empty on the final row)    |

use crate::episode::EpisodeLog;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub t: f64,
    pub position_error: f64,
    pub orientation_error: f64,
    pub clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub t: f64,
    pub h_norm: f64,
    pub h_exec_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub t: f64,
    pub plan_ms: Option<f64>,
    pub exec_ms: Option<f64>,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), PlotError> {
    let csv_err = |source| PlotError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| PlotError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the three series into `out_dir` and returns their paths.
pub fn emit_plots(log: &EpisodeLog, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, PlotError> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| PlotError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let paths = [dir.join("tracking.csv"), dir.join("constraint.csv"), dir.join("timing.csv")];
    write_rows(
        &paths[0],
        log.records.iter().map(|r| TrackingRow {
            t: r.t,
            position_error: r.position_error,
            orientation_error: r.orientation_error,
            clearance: r.clearance,
        }),
    )?;
    write_rows(
        &paths[1],
        log.records.iter().map(|r| ConstraintRow {
            t: r.t,
            h_norm: r.h_norm,
            h_exec_max: r.h_exec_max,
        }),
    )?;
    write_rows(
        &paths[2],
        log.records.iter().enumerate().map(|(i, r)| TimingRow {
            t: r.t,
            plan_ms: log.timing.plan_ms.get(i).copied(),
            exec_ms: log.timing.exec_ms.get(i).copied(),
        }),
    )?;
    Ok(paths.to_vec())
}
