//! Long-format plot tables `(series, t|x, value)` from run artifacts.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_numeric_csv};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// `summary.csv` of `solve`.
    Energy,
    /// `refinement.csv` of `verify-identity`.
    Residual,
    /// `history_*.csv` of `reconstruct`.
    Objective,
    /// `constant_vs_size_*.csv` of `verify-observability`.
    Constant,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(PlotKind::Energy),
            "residual" => Ok(PlotKind::Residual),
            "objective" => Ok(PlotKind::Objective),
            "constant" => Ok(PlotKind::Constant),
            _ => Err(Error::InvalidParameters(format!("unknown plot kind {s} (energy, residual, objective, constant)"))),
        }
    }
}

impl PlotKind {
    /// Abscissa column, axis label, and columns that are not series.
    fn layout(self) -> (&'static str, &'static str, &'static [&'static str]) {
        match self {
            PlotKind::Energy => ("time", "t", &["level"]),
            PlotKind::Residual => ("h", "x", &[]),
            PlotKind::Objective => ("iteration", "x", &[]),
            PlotKind::Constant => ("members", "x", &["n_data"]),
        }
    }
}

/// Converts a numeric artifact into long format.
pub fn plotdata_from_str(body: &str, kind: PlotKind) -> Result<String> {
    let (header, rows) = read_numeric_csv(body)?;
    let (xcol, axis, skip) = kind.layout();
    let xi = header.iter().position(|h| h == xcol).ok_or_else(|| Error::Format(format!("artifact has no `{xcol}` column")))?;
    let mut out = format!("series,{axis},value\n");
    for (ci, name) in header.iter().enumerate() {
        if ci == xi || skip.contains(&name.as_str()) {
            continue;
        }
        for r in &rows {
            out.push_str(&format!("{name},{},{}\n", fmt_f64(r[xi]), fmt_f64(r[ci])));
        }
    }
    Ok(out)
}

pub fn emit_plotdata(artifact: &Path, kind: PlotKind) -> Result<String> {
    let body = std::fs::read_to_string(artifact).map_err(|_| Error::MissingArtifact(artifact.display().to_string()))?;
    plotdata_from_str(&body, kind)
}

/// Values of one series from a long-format table.
pub fn series_values(long: &str, series: &str) -> Vec<(f64, f64)> {
    long.lines()
        .skip(1)
        .filter_map(|l| {
            let mut it = l.split(',');
            if it.next()? != series {
                return None;
            }
            Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?))
        })
        .collect()
}
