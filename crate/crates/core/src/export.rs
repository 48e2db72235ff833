// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! CSV and JSON writers.
//!
//! Floating-point values are written with 17 significant digits
//! (`{:.16e}`), enough to round-trip every `f64` exactly.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{DensityGrid, DensityHistory};
use crate::sim::{EnsembleSnapshot, JumpEvent};
use crate::verify::ResidualReport;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{what} cannot be exported as {format:?}")]
    Unsupported { what: &'static str, format: ExportFormat },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Exact decimal form of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn coord_header(prefix: &str, dim: usize) -> String {
    (0..dim).map(|k| format!(",{prefix}{k}")).collect()
}

/// `particle,t,x0..x{d-1},y,tau`, one row per particle in index order.
pub fn write_snapshot_csv<W: Write>(mut w: W, snapshot: &EnsembleSnapshot, dim: usize) -> io::Result<()> {
    writeln!(w, "particle,t{},y,tau", coord_header("x", dim))?;
    for (i, p) in snapshot.particles.iter().enumerate() {
        write!(w, "{i},{}", fmt_f64(p.t))?;
        for k in 0..dim {
            write!(w, ",{}", fmt_f64(p.x.coords[k]))?;
        }
        writeln!(w, ",{},{}", p.y.0, fmt_f64(p.tau))?;
    }
    Ok(())
}

/// `particle,time,from_y,to_y,x0..x{d-1}`, sorted by `(particle, time)`.
pub fn write_jump_log_csv<W: Write>(mut w: W, events: &[JumpEvent], dim: usize) -> io::Result<()> {
    let mut order: Vec<&JumpEvent> = events.iter().collect();
    order.sort_by(|a, b| a.particle.cmp(&b.particle).then(a.time.total_cmp(&b.time)));
    writeln!(w, "particle,time,from_y,to_y{}", coord_header("x", dim))?;
    for e in order {
        write!(w, "{},{},{},{}", e.particle, fmt_f64(e.time), e.from_y.0, e.to_y.0)?;
        for k in 0..dim {
            write!(w, ",{}", fmt_f64(e.x_at_jump.coords[k]))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Long-format grid: one row per `(cell, y, tau bin)` plus one atom row per
/// `(cell, y)` when the grid tracks the atom. Atom rows have tau index
/// `atom`, tau center `t - t_start` and hold the raw mass fraction; all
/// other rows hold densities.
pub fn write_grid_csv<W: Write>(mut w: W, grid: &DensityGrid) -> io::Result<()> {
    let d = grid.x.dim();
    writeln!(
        w,
        "t{},y,tau_index{},tau_center,kind,value",
        coord_header("i", d),
        coord_header("c", d)
    )?;
    let t = fmt_f64(grid.t);
    for cell in 0..grid.x.cells() {
        let idx = grid.x.multi(cell);
        let center = grid.x.center(cell);
        let mut prefix = t.clone();
        for k in 0..d {
            prefix.push_str(&format!(",{}", idx[k]));
        }
        let centers: String = (0..d).map(|k| format!(",{}", fmt_f64(center[k]))).collect();
        for y in 0..grid.n_y {
            for ti in 0..grid.tau_axis.bins {
                writeln!(
                    w,
                    "{prefix},{y},{ti}{centers},{},density,{}",
                    fmt_f64(grid.tau_axis.center(ti)),
                    fmt_f64(grid.density(cell, y, ti))
                )?;
            }
            if grid.separate_atom {
                writeln!(
                    w,
                    "{prefix},{y},atom{centers},{},atom_mass,{}",
                    fmt_f64(grid.t - grid.t_start),
                    fmt_f64(grid.atom_mass(cell, y))
                )?;
            }
        }
    }
    Ok(())
}

/// `t,i0..,c0..,value` rows of the thought marginal for every stored time.
pub fn write_history_csv<W: Write>(mut w: W, history: &DensityHistory) -> io::Result<()> {
    let Some(first) = history.entries.first() else {
        return writeln!(w, "t,value");
    };
    let d = first.x.dim();
    writeln!(w, "t{}{},value", coord_header("i", d), coord_header("c", d))?;
    for m in &history.entries {
        for cell in 0..m.x.cells() {
            let idx = m.x.multi(cell);
            let c = m.x.center(cell);
            write!(w, "{}", fmt_f64(m.t))?;
            for k in 0..d {
                write!(w, ",{}", idx[k])?;
            }
            for k in 0..d {
                write!(w, ",{}", fmt_f64(c[k]))?;
            }
            writeln!(w, ",{}", fmt_f64(m.density(cell)))?;
        }
    }
    Ok(())
}

/// Writes a residual report. Reports are JSON only.
pub fn write_report<W: Write>(
    w: W,
    report: &ResidualReport,
    format: ExportFormat,
) -> Result<(), ExportError> {
    match format {
        ExportFormat::Json => {
            serde_json::to_writer_pretty(w, report)?;
            Ok(())
        }
        ExportFormat::Csv => Err(ExportError::Unsupported {
            what: "residual report",
            format,
        }),
    }
}

/// Writes a density grid. Grids are CSV only.
pub fn write_grid<W: Write>(w: W, grid: &DensityGrid, format: ExportFormat) -> Result<(), ExportError> {
    match format {
        ExportFormat::Csv => Ok(write_grid_csv(w, grid)?),
        ExportFormat::Json => Err(ExportError::Unsupported {
            what: "density grid",
            format,
        }),
    }
}
