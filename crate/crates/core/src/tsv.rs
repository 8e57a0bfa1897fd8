//! Tab-separated tables with a header row.
//!
//! Floats are written with Rust's shortest round-trip formatting so that a
//! table read back parses to bit-identical values. Missing values use the
//! `NA` token.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const NA: &str = "NA";

#[derive(Debug, Clone)]
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str, path: impl AsRef<Path>) -> Result<Table> {
        let path = path.as_ref().to_path_buf();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::parse(&path, 1, "empty table"))?
            .split('\t')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split('\t').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(Error::parse(
                    &path,
                    i + 2,
                    format!("expected {} fields, found {}", header.len(), row.len()),
                ));
            }
            rows.push(row);
        }
        Ok(Table { path, header, rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Table> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Table::parse(&text, path)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(&self.path, 1, format!("missing column `{name}`")))
    }

    /// Requires the given columns and returns their indices in order.
    pub fn columns<const N: usize>(&self, names: [&str; N]) -> Result<[usize; N]> {
        let mut out = [0; N];
        for (o, n) in out.iter_mut().zip(names) {
            *o = self.column(n)?;
        }
        Ok(out)
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64> {
        parse_f64(&self.rows[row][col]).ok_or_else(|| {
            Error::parse(&self.path, row + 2, format!("not a number: `{}`", self.rows[row][col]))
        })
    }

    pub fn opt_f64_at(&self, row: usize, col: usize) -> Result<Option<f64>> {
        if self.rows[row][col] == NA {
            Ok(None)
        } else {
            self.f64_at(row, col).map(Some)
        }
    }

    pub fn u64_at(&self, row: usize, col: usize) -> Result<u64> {
        self.rows[row][col].parse().map_err(|_| {
            Error::parse(&self.path, row + 2, format!("not an integer: `{}`", self.rows[row][col]))
        })
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok()
}

/// Row-at-a-time builder.
#[derive(Debug, Default)]
pub struct Writer {
    buf: String,
}

impl Writer {
    pub fn new(header: &[&str]) -> Writer {
        let mut w = Writer::default();
        w.buf.push_str(&header.join("\t"));
        w.buf.push('\n');
        w
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join("\t"));
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }

    pub fn write(self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub fn fmt_f64(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").unwrap();
    s
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| NA.to_string())
}
