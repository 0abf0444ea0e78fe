//! Minimal CSV reading and writing.
//!
//! Every field this workbench emits is a bare token (name, number, or
//! path stem), so no quoting or escaping is needed; writers reject
//! fields that would require it.

use std::fs;
use std::path::Path;

use csi4cast_core::{Error, Result};

pub struct CsvWriter {
    buf: String,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut w = CsvWriter { buf: String::new(), columns: header.len() };
        w.push_row(header.iter().map(|s| s.to_string()));
        w
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.push_row(fields.into_iter().map(Into::into));
    }

    fn push_row<I: Iterator<Item = String>>(&mut self, fields: I) {
        let mut count = 0;
        for (i, field) in fields.enumerate() {
            assert!(
                !field.contains(',') && !field.contains('\n') && !field.contains('"'),
                "CSV field needs quoting: {field:?}"
            );
            if i > 0 {
                self.buf.push(',');
            }
            self.buf.push_str(&field);
            count += 1;
        }
        assert_eq!(count, self.columns, "row width differs from header");
        self.buf.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.buf)?;
        Ok(())
    }
}

/// Header plus data rows, each split on commas.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingData(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MissingData(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != header.len() {
            return Err(Error::InvalidEncoding(format!(
                "{} row {}: {} fields, header has {}",
                path.display(),
                i + 2,
                fields.len(),
                header.len()
            )));
        }
        rows.push(fields);
    }
    Ok((header, rows))
}

/// Column index by name.
pub fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::InvalidEncoding(format!("missing CSV column '{name}'")))
}

pub fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::InvalidEncoding(format!("{what}: '{field}' is not a number")))
}

pub fn parse_u64(field: &str, what: &str) -> Result<u64> {
    field
        .parse()
        .map_err(|_| Error::InvalidEncoding(format!("{what}: '{field}' is not an integer")))
}

/// Shortest decimal text that parses back to exactly `x`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}
