//! CSV exchange of paths and estimates.
//!
//! Path files have a header and one row per grid point, `t,value` for a
//! single path or `t,base,shifted` for a coupled pair. A coupled file may
//! carry a fourth column `log_gap` with the log of the tracked gap; without
//! it the gap is recovered by differencing, which fails once the paths agree
//! to the last bit. Times must start at 0 and be evenly spaced. Floats are
//! written with 17 significant digits so a write/read cycle is lossless.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::estimators::EstimatorOutput;
use crate::grid::{Path, TimeGrid};
use crate::sde::CoupledPaths;

/// Relative tolerance on the spacing of time stamps.
const GRID_TOLERANCE: f64 = 1e-9;

/// Contents of a path file.
#[derive(Debug, Clone)]
pub enum PathData {
    Single(Path),
    Coupled {
        base: Path,
        shifted: Path,
        log_gaps: Option<Vec<f64>>,
    },
}

impl PathData {
    pub fn base(&self) -> &Path {
        match self {
            PathData::Single(p) => p,
            PathData::Coupled { base, .. } => base,
        }
    }

    /// Rebuilds the coupling, from the `log_gap` column when present and
    /// otherwise with `epsilon = shifted(0) - base(0)`.
    pub fn into_coupled(self) -> Result<CoupledPaths> {
        match self {
            PathData::Single(_) => Err(Error::param(
                "input",
                "file has a single path; coupled estimation needs `t,base,shifted`",
            )),
            PathData::Coupled {
                base,
                shifted,
                log_gaps: Some(lg),
            } => CoupledPaths::from_log_gaps(base, shifted, &lg),
            PathData::Coupled { base, shifted, .. } => {
                let eps = shifted.first() - base.first();
                CoupledPaths::from_observed(base, shifted, eps)
            }
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::parse(line, format!("{other:?}")),
    }
}

pub fn write_path<W: Write>(writer: W, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "value"]).map_err(csv_err)?;
    for (t, v) in path.grid().times().zip(path.values()) {
        w.write_record([fmt(t), fmt(*v)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_coupled<W: Write>(writer: W, paths: &CoupledPaths) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "base", "shifted", "log_gap"]).map_err(csv_err)?;
    let rows = paths
        .base
        .grid()
        .times()
        .zip(paths.base.values().iter().zip(paths.shifted.values()))
        .zip(paths.log_gaps());
    for ((t, (b, s)), lg) in rows {
        w.write_record([fmt(t), fmt(*b), fmt(*s), fmt(lg)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a path file, deciding the layout from the header.
pub fn read_paths<R: Read>(reader: R) -> Result<PathData> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let width = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["t", "value"] => 2,
        ["t", "base", "shifted"] => 3,
        ["t", "base", "shifted", "log_gap"] => 4,
        other => {
            return Err(Error::parse(
                1,
                format!(
                    "expected header `t,value`, `t,base,shifted` or `t,base,shifted,log_gap`, got `{}`",
                    other.join(",")
                ),
            ))
        }
    };
    let mut times = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); width - 1];
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(Error::parse(line, format!("expected {width} fields, got {}", rec.len())));
        }
        let mut nums = rec.iter().map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line, format!("`{f}` is not a finite number")))
        });
        times.push(nums.next().expect("width >= 2")?);
        for c in cols.iter_mut() {
            c.push(nums.next().expect("checked width")?);
        }
    }
    let grid = grid_from_times(&times)?;
    let log_gaps = if width == 4 { cols.pop() } else { None };
    let mut cols = cols.into_iter().map(|c| Path::new(grid, c));
    let first = cols.next().expect("at least one value column")?;
    Ok(match cols.next() {
        None => PathData::Single(first),
        Some(shifted) => PathData::Coupled {
            base: first,
            shifted: shifted?,
            log_gaps,
        },
    })
}

fn grid_from_times(times: &[f64]) -> Result<TimeGrid> {
    if times.len() < 3 {
        return Err(Error::parse(1, "need at least 3 rows"));
    }
    if times[0] != 0.0 {
        return Err(Error::parse(2, format!("first time must be 0, got {}", times[0])));
    }
    let n = times.len() - 1;
    let horizon = times[n];
    if !(horizon > 0.0) {
        return Err(Error::parse(n + 2, "times must increase"));
    }
    let step = horizon / n as f64;
    for (i, t) in times.iter().enumerate() {
        if (t - i as f64 * step).abs() > GRID_TOLERANCE * horizon {
            return Err(Error::parse(i + 2, format!("time {t} is off the uniform grid of step {step}")));
        }
    }
    TimeGrid::new(horizon, n)
}

/// Columns `x,f_hat,b_tilde,b_hat_eps,correction,degenerate`.
pub fn write_estimates<W: Write>(writer: W, out: &EstimatorOutput) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "f_hat", "b_tilde", "b_hat_eps", "correction", "degenerate"])
        .map_err(csv_err)?;
    for i in 0..out.len() {
        w.write_record([
            fmt(out.x_grid[i]),
            fmt(out.f_hat[i]),
            fmt(out.b_tilde[i]),
            fmt(out.b_hat_eps[i]),
            fmt(out.correction[i]),
            out.degenerate_mask[i].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
