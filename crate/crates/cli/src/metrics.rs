use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::CliError;

/// A header plus string rows, as written to and read from CSV files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<(), CliError> {
        if row.len() != self.header.len() {
            return Err(CliError::Schema(format!(
                "row has {} fields, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Writes `table` as CSV: header first, UTF-8, `\n` line endings, fields
/// quoted only when they need it.
pub fn emit_metrics(table: &Table, path: &Path) -> Result<(), CliError> {
    let file = File::create(path)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    w.write_record(&table.header)?;
    for row in &table.rows {
        if row.len() != table.header.len() {
            return Err(CliError::Schema(format!(
                "row has {} fields, header has {}",
                row.len(),
                table.header.len()
            )));
        }
        w.write_record(row)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Io(e.into_error()))?
        .flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Table, CliError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok(Table { header, rows })
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
