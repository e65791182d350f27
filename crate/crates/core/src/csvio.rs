//! Minimal reader/writer for the comma-separated formats used by the
//! pipeline. Fields never contain commas or quotes, so no quoting is done.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Row {
    pub line: usize,
    pub fields: Vec<String>,
}

/// Reads a file whose first line must equal `header` joined by commas.
/// When `optional_tail` is non-empty, the header may additionally carry
/// those trailing columns; the returned flag says whether it did.
pub(crate) fn read_table(
    path: &Path,
    header: &[&str],
    optional_tail: &[&str],
) -> Result<(Vec<Row>, bool)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, head) = match lines.next() {
        Some(h) => h,
        None => return Err(Error::parse(path, 1, "missing header")),
    };
    let head = head.trim_start_matches('\u{feff}').trim_end();
    let base = header.join(",");
    let with_tail = if optional_tail.is_empty() {
        None
    } else {
        Some(format!("{},{}", base, optional_tail.join(",")))
    };
    let has_tail = if head == base {
        false
    } else if with_tail.as_deref() == Some(head) {
        true
    } else {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{base}`, found `{head}`"),
        ));
    };
    let width = header.len() + if has_tail { optional_tail.len() } else { 0 };

    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != width {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        rows.push(Row {
            line: line_no,
            fields,
        });
    }
    Ok((rows, has_tail))
}

pub(crate) fn parse_f64(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("{what}: `{field}` is not a number")))
}

pub(crate) fn parse_usize(path: &Path, line: usize, field: &str, what: &str) -> Result<usize> {
    field.parse::<usize>().map_err(|_| {
        Error::parse(
            path,
            line,
            format!("{what}: `{field}` is not a non-negative integer"),
        )
    })
}

/// Accumulates CSV text; `finish` writes it out in one go.
pub(crate) struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        CsvWriter { buf }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: std::fmt::Display,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            first = false;
            let _ = write!(self.buf, "{f}");
        }
        self.buf.push('\n');
    }

    pub fn into_string(self) -> String {
        self.buf
    }

    pub fn finish(self, path: &Path) -> Result<()> {
        write_file(path, self.buf.as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
