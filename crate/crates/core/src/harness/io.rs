//! CSV input and output. Numbers are written with 17 significant digits so
//! that every value reads back exactly; `#` lines carry provenance.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;

use super::HarnessError;
use crate::models::CountSeries;
use crate::particle_filter::Measurement;

/// `{:.16e}`: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Writes `header` (already `#`-prefixed), the column names and the rows.
pub fn write_csv(path: &Path, header: &str, columns: &[String], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(header.as_bytes()).map_err(|e| io_err(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(columns).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Column names and numeric rows of a CSV file, skipping `#` lines.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), HarnessError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers: Vec<String> = r
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.parse::<f64>()
                    .map_err(|e| io_err(path, format!("row {}, column {}: {e}", i + 1, headers.get(j).map_or("?", |h| h))))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((headers, rows))
}

/// Gaussian-model measurements: columns `t,y...`.
pub fn read_series(path: &Path) -> Result<Vec<Measurement<f64>>, HarnessError> {
    let (headers, rows) = read_table(path)?;
    if headers.first().map(String::as_str) != Some("t") || headers.len() < 2 {
        return Err(io_err(path, "expected columns t,y..."));
    }
    let mut last = f64::NEG_INFINITY;
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(io_err(path, format!("row {}: non-finite value", i + 1)));
            }
            if !(row[0] > last) {
                return Err(io_err(path, format!("row {}: times must be strictly increasing", i + 1)));
            }
            last = row[0];
            Ok(Measurement::new(row[0], DVector::from_column_slice(&row[1..])))
        })
        .collect()
}

/// Epidemic counts: columns `week,deaths` with integer values.
pub fn read_counts(path: &Path) -> Result<CountSeries<f64>, HarnessError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers = r.headers().map_err(|e| io_err(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "week" || &headers[1] != "deaths" {
        return Err(io_err(path, "expected columns week,deaths"));
    }
    let mut times = Vec::new();
    let mut counts = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let week: i64 = rec[0]
            .parse()
            .map_err(|e| io_err(path, format!("row {}: week: {e}", i + 1)))?;
        let deaths: u64 = rec[1]
            .parse()
            .map_err(|e| io_err(path, format!("row {}: deaths must be a nonnegative integer: {e}", i + 1)))?;
        times.push(week as f64);
        counts.push(deaths);
    }
    CountSeries::new(times, counts).map_err(|e| io_err(path, e))
}
