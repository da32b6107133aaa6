//! Plain-text numeric I/O shared by datasets, checkpoints and reports.
//!
//! Floats are written with 17 significant digits so every `f64` survives a
//! write/read cycle bit-exactly. Files are UTF-8 with LF line endings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

/// Formats one value with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn matrix_to_csv(m: &Matrix, header: Option<&[String]>) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 24 + 16);
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, m: &Matrix, header: Option<&[String]>) -> Result<()> {
    write_text(path, &matrix_to_csv(m, header))
}

/// Parses a numeric CSV. When `expect_cols` is given every row must match it.
pub fn parse_matrix_csv(
    text: &str,
    has_header: bool,
    expect_cols: Option<usize>,
    what: &str,
) -> Result<Matrix> {
    let mut lines = text.lines();
    if has_header {
        lines.next();
    }
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = expect_cols;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("{what}: line {}: bad number {field:?}", i + 1)))?;
            data.push(v);
        }
        let n = data.len() - before;
        match cols {
            Some(c) if c != n => {
                return Err(Error::format(format!(
                    "{what}: line {} has {n} columns, expected {c}",
                    i + 1
                )))
            }
            None => cols = Some(n),
            _ => {}
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
        .map_err(|e| Error::format(format!("{what}: {e}")))
}

pub fn read_matrix_csv(path: &Path, has_header: bool, expect_cols: Option<usize>) -> Result<Matrix> {
    let text = read_text(path)?;
    parse_matrix_csv(&text, has_header, expect_cols, &path.display().to_string())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        let values = [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE, -0.0];
        for v in values {
            let back: f64 = format_f64(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v}");
        }
    }

    #[test]
    fn csv_parse_checks_columns() {
        let m = parse_matrix_csv("1,2\n3,4\n", false, Some(2), "t").unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert!(matches!(
            parse_matrix_csv("1,2\n3\n", false, None, "t"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_matrix_csv("w_0\nx\n", true, None, "t"),
            Err(Error::Format(_))
        ));
    }
}
