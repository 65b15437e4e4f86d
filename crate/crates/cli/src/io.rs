//! CSV and JSON files: 17 significant digits, LF line endings, atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::exit::DataError;

/// Formats a double with 17 significant digits, enough to round-trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Points read from a CSV file.
#[derive(Debug, Clone)]
pub struct Points {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
}

/// Reads numeric rows; with `header` the first line is kept as column names.
/// Errors name the offending line.
pub fn read_points(path: &Path, header: bool) -> Result<Points> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let names = if header {
        let h = reader.headers().map_err(|e| DataError(format!("{}: {e}", path.display())))?;
        Some(h.iter().map(str::to_string).collect::<Vec<_>>())
    } else {
        None
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError(format!("{} line {line}: `{f}` is not a finite number", path.display())))
            })
            .collect::<std::result::Result<Vec<f64>, DataError>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                bail!(DataError(format!(
                    "{} line {line}: {} columns, expected {}",
                    path.display(),
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!(DataError(format!("{}: no rows", path.display())));
    }
    if let Some(h) = &names {
        if h.len() != rows[0].len() {
            bail!(DataError(format!(
                "{}: header has {} columns, rows have {}",
                path.display(),
                h.len(),
                rows[0].len()
            )));
        }
    }
    Ok(Points { header: names, rows })
}

/// Renders rows of numbers under an optional header.
pub fn csv_text(header: Option<&[String]>, rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let name = path.file_name().context("output path has no file name")?.to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))
}

pub fn write_csv(path: &Path, header: Option<&[String]>, rows: &[Vec<f64>]) -> Result<()> {
    write_atomic(path, csv_text(header, rows).as_bytes())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}
