//! Numeric CSV tables: comma-separated, mandatory header, LF endings,
//! floats written with 17 significant digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Array2<f64>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Shortest exact text for `v`: 17 significant digits in scientific form.
pub fn format_float(v: f64) -> String {
    // Negative zero prints as zero.
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.16e}")
}

/// Parse a table. Errors name the 1-based data row and the file line.
pub fn parse_table(text: &str, source: &str) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{source}: header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(CliError::Data(format!("{source}: missing header row")));
    }
    let width = header.len();
    let mut values = Vec::new();
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| CliError::Data(format!("{source}: row {row}: {e}")))?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(row as u64 + 1);
        if record.len() != width {
            return Err(CliError::Data(format!(
                "{source}: row {row} (line {line}): expected {width} fields, found {}",
                record.len()
            )));
        }
        for (field, name) in record.iter().zip(&header) {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::Data(format!(
                    "{source}: row {row} (line {line}), column '{name}': cannot parse '{field}' as a number"
                ))
            })?;
            if !v.is_finite() {
                return Err(CliError::Data(format!(
                    "{source}: row {row} (line {line}), column '{name}': value is not finite"
                )));
            }
            values.push(v);
        }
        n += 1;
    }
    let rows = Array2::from_shape_vec((n, width), values).expect("row-major buffer");
    Ok(Table { header, rows })
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_table(&text, &path.display().to_string())
}

pub fn table_to_string(header: &[String], rows: &ArrayView2<f64>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows.rows() {
        let fields: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Write via a sibling temporary file so a failed run leaves no partial output.
pub fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(contents.as_bytes())?;
        w.flush()?;
        drop(w);
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

pub fn write_table(path: &Path, header: &[String], rows: &ArrayView2<f64>) -> CliResult<()> {
    write_atomic(path, &table_to_string(header, rows))
}
