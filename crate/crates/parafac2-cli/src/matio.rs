//! Factor-matrix text formats.
//!
//! Single matrix:
//!
//! ```text
//! %%Matrix rows cols
//! <rows lines of cols whitespace-delimited values>
//! ```
//!
//! Stacked per-slice matrices (Q_k, C_k, U_k):
//!
//! ```text
//! %%MatrixStack K
//! %%slice k rows cols
//! <rows lines>
//! ...
//! ```
//!
//! Values are written at 17 significant digits, which round-trips f64
//! exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: line {line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> MatIoError {
    MatIoError::Malformed {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn format_matrix(out: &mut String, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{:.16e}", m[(i, j)]).expect("string write");
        }
        out.push('\n');
    }
}

pub fn write_matrix<P: AsRef<Path>>(path: P, m: &DMatrix<f64>) -> Result<(), MatIoError> {
    let mut out = String::new();
    writeln!(out, "%%Matrix {} {}", m.nrows(), m.ncols()).expect("string write");
    format_matrix(&mut out, m);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_stack<P: AsRef<Path>>(path: P, ms: &[DMatrix<f64>]) -> Result<(), MatIoError> {
    let mut out = String::new();
    writeln!(out, "%%MatrixStack {}", ms.len()).expect("string write");
    for (k, m) in ms.iter().enumerate() {
        writeln!(out, "%%slice {k} {} {}", m.nrows(), m.ncols()).expect("string write");
        format_matrix(&mut out, m);
    }
    fs::write(path, out)?;
    Ok(())
}

struct Lines<'a> {
    path: &'a Path,
    iter: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn next_nonempty(&mut self) -> Option<(usize, &'a str)> {
        loop {
            let line = self.iter.next()?;
            self.line_no += 1;
            if !line.trim().is_empty() {
                return Some((self.line_no, line.trim()));
            }
        }
    }

    fn read_rows(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>, MatIoError> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let (no, line) = self
                .next_nonempty()
                .ok_or_else(|| malformed(self.path, self.line_no, "unexpected end of file"))?;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != cols {
                return Err(malformed(
                    self.path,
                    no,
                    format!("expected {cols} values, got {}", values.len()),
                ));
            }
            for (j, tok) in values.iter().enumerate() {
                m[(i, j)] = tok
                    .parse()
                    .map_err(|_| malformed(self.path, no, format!("bad value {tok:?}")))?;
            }
        }
        Ok(m)
    }
}

fn header_fields<'a>(
    path: &Path,
    no: usize,
    line: &'a str,
    magic: &str,
    count: usize,
) -> Result<Vec<&'a str>, MatIoError> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != count + 1 || toks[0] != magic {
        return Err(malformed(
            path,
            no,
            format!("expected \"{magic}\" header with {count} fields, got {line:?}"),
        ));
    }
    Ok(toks[1..].to_vec())
}

fn parse_dim(path: &Path, no: usize, tok: &str) -> Result<usize, MatIoError> {
    tok.parse()
        .map_err(|_| malformed(path, no, format!("bad dimension {tok:?}")))
}

pub fn read_matrix<P: AsRef<Path>>(path: P) -> Result<DMatrix<f64>, MatIoError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path)?;
    let mut lines = Lines {
        path,
        iter: content.lines(),
        line_no: 0,
    };
    let (no, header) = lines
        .next_nonempty()
        .ok_or_else(|| malformed(path, 1, "empty file"))?;
    let dims = header_fields(path, no, header, "%%Matrix", 2)?;
    let rows = parse_dim(path, no, dims[0])?;
    let cols = parse_dim(path, no, dims[1])?;
    lines.read_rows(rows, cols)
}

pub fn read_stack<P: AsRef<Path>>(path: P) -> Result<Vec<DMatrix<f64>>, MatIoError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path)?;
    let mut lines = Lines {
        path,
        iter: content.lines(),
        line_no: 0,
    };
    let (no, header) = lines
        .next_nonempty()
        .ok_or_else(|| malformed(path, 1, "empty file"))?;
    let fields = header_fields(path, no, header, "%%MatrixStack", 1)?;
    let count = parse_dim(path, no, fields[0])?;

    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let (no, header) = lines
            .next_nonempty()
            .ok_or_else(|| malformed(path, lines.line_no, "unexpected end of file"))?;
        let fields = header_fields(path, no, header, "%%slice", 3)?;
        let idx = parse_dim(path, no, fields[0])?;
        if idx != k {
            return Err(malformed(path, no, format!("expected slice {k}, got {idx}")));
        }
        let rows = parse_dim(path, no, fields[1])?;
        let cols = parse_dim(path, no, fields[2])?;
        out.push(lines.read_rows(rows, cols)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtx");
        let m = DMatrix::from_fn(3, 4, |i, j| {
            (i as f64 + 1.0) / (j as f64 + 3.0) * 1.234e-7_f64.powi(1 + (j % 2) as i32)
        });
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn stack_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.mtx");
        let ms = vec![
            DMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64 / 7.0),
            DMatrix::from_fn(4, 3, |i, j| ((i + j) as f64).sin()),
        ];
        write_stack(&path, &ms).unwrap();
        let back = read_stack(&path).unwrap();
        assert_eq!(ms, back);
    }

    #[test]
    fn rejects_wrong_value_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtx");
        std::fs::write(&path, "%%Matrix 1 3\n1.0 2.0\n").unwrap();
        assert!(matches!(
            read_matrix(&path),
            Err(MatIoError::Malformed { line: 2, .. })
        ));
    }
}
