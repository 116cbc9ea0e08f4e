//! Standalone matplotlib scripts reading study and locality CSV files.

use std::path::{Path, PathBuf};

use tblimit::{Error, Result};

/// Columns and axes of one plot.
#[derive(Clone, Debug, PartialEq)]
pub enum PlotKind {
    /// Log-log error against `R` with a guide line of the given slope.
    Convergence { column: String, guide_slope: f64 },
    /// Semilog derivative magnitude against distance.
    Locality,
}

/// Header row and number of data rows, skipping `#` comment lines.
pub fn csv_shape(text: &str) -> Result<(Vec<String>, usize)> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Configuration("CSV file has no header".into()))?;
    let cols = header.split(',').map(|s| s.trim().to_string()).collect();
    Ok((cols, lines.count()))
}

/// Plot kind for a CSV file; `guide_slope` overrides the slope stored in the
/// sibling JSON summary.
pub fn classify(csv: &Path, text: &str, guide_slope: Option<f64>) -> Result<PlotKind> {
    let (cols, rows) = csv_shape(text)?;
    if rows == 0 {
        return Err(Error::Configuration(format!("{} has no data rows", csv.display())));
    }
    let has = |c: &str| cols.iter().any(|x| x == c);
    if has("r") && has("value") {
        return Ok(PlotKind::Locality);
    }
    for c in ["R", "mu_error", "du_error"] {
        if !has(c) {
            return Err(Error::Configuration(format!("{} lacks column `{c}`", csv.display())));
        }
    }
    let summary: Option<serde_json::Value> =
        std::fs::read_to_string(csv.with_extension("json")).ok().and_then(|s| serde_json::from_str(&s).ok());
    let guide_slope = match guide_slope {
        Some(s) => s,
        None => summary
            .as_ref()
            .and_then(|v| v["rate_theory"].as_f64())
            .ok_or_else(|| Error::Configuration(format!("no guide slope for {}", csv.display())))?,
    };
    let du = cols.iter().position(|c| c == "du_error").expect("checked above");
    let column = if text.lines().filter(|l| !l.starts_with('#')).skip(1).all(|l| l.split(',').nth(du) == Some("nan")) {
        "mu_error"
    } else {
        "du_error"
    };
    Ok(PlotKind::Convergence { column: column.to_string(), guide_slope })
}

pub fn script(csv: &Path, kind: &PlotKind) -> String {
    let name = csv.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let png = csv.with_extension("png").file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let body = match kind {
        PlotKind::Convergence { column, guide_slope } => format!(
            r#"r = np.array(data["R"], dtype=float)
e = np.array(data["{column}"], dtype=float)
ax.loglog(r, e, "o-", label="{column}")
guide = e[-1] * (r / r[-1]) ** ({guide_slope})
ax.loglog(r, guide, "k--", label="slope {guide_slope}")
ax.set_xlabel("R")
ax.set_ylabel("{column}")"#
        ),
        PlotKind::Locality => r#"r = np.array(data["r"], dtype=float)
v = np.array(data["value"], dtype=float)
keep = v > 0
ax.semilogy(r[keep], v[keep], "o")
ax.set_xlabel("distance")
ax.set_ylabel("derivative magnitude")"#
            .to_string(),
    };
    format!(
        r##"#!/usr/bin/env python3
# Plots {name}; run from the directory holding the CSV file.
import csv
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

with open("{name}") as fh:
    rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
if not rows:
    sys.exit("{name} has no data rows")
data = {{k: [row[k] for row in rows] for k in rows[0]}}
fig, ax = plt.subplots(figsize=(5, 4))
{body}
ax.legend()
fig.tight_layout()
fig.savefig("{png}", dpi=150)
"##
    )
}

/// Writes `<csv stem>.py` next to every CSV file and returns the script paths.
pub fn emit_plots(csvs: &[PathBuf], guide_slope: Option<f64>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for csv in csvs {
        let text = std::fs::read_to_string(csv)?;
        let kind = classify(csv, &text, guide_slope)?;
        let path = csv.with_extension("py");
        std::fs::write(&path, script(csv, &kind))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_csv_gets_loglog_script() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("mu.csv");
        std::fs::write(&csv, "# h\nR,N_R,Ne_R,mu_R,mu_error,du_error,iterations\n1,2,2,0.1,0.5,nan,3\n").unwrap();
        std::fs::write(dir.path().join("mu.json"), r#"{"rate_theory": -0.5}"#).unwrap();
        let p = emit_plots(&[csv], None).unwrap();
        let s = std::fs::read_to_string(&p[0]).unwrap();
        assert!(s.contains("loglog") && s.contains("slope -0.5") && s.contains("\"mu_error\""));
    }

    #[test]
    fn locality_csv_gets_semilog_script() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("loc.csv");
        std::fs::write(&csv, "m,r,value\n1,1.0,0.2\n").unwrap();
        let s = std::fs::read_to_string(&emit_plots(&[csv], None).unwrap()[0]).unwrap();
        assert!(s.contains("semilogy"));
    }

    #[test]
    fn empty_or_foreign_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("e.csv");
        std::fs::write(&csv, "# only a comment\nR,mu_error,du_error\n").unwrap();
        assert!(emit_plots(std::slice::from_ref(&csv), Some(-1.0)).is_err());
        std::fs::write(&csv, "a,b\n1,2\n").unwrap();
        assert!(emit_plots(&[csv], Some(-1.0)).is_err());
        assert!(!dir.path().join("e.py").exists());
    }
}
