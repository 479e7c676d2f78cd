//! Dense matrix files.
//!
//! Plain text, row-major. The first line holds the shape as `rows,cols`;
//! each following line is one row of comma-separated numbers written with
//! the shortest representation that parses back to the same `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 12 + 16);
    out.push_str(&format!("{},{}\n", m.nrows(), m.ncols()));
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&m[(i, j)].to_string());
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    parse_matrix(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn parse_matrix(text: &str) -> std::result::Result<DMatrix<f64>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty matrix file")?;
    let (rows, cols) = header
        .split_once(',')
        .and_then(|(r, c)| {
            Some((
                r.trim().parse::<usize>().ok()?,
                c.trim().parse::<usize>().ok()?,
            ))
        })
        .ok_or_else(|| format!("bad shape header `{header}`"))?;
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate().take(rows) {
        let before = data.len();
        if cols > 0 {
            for cell in line.split(',') {
                data.push(
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| format!("row {i}: {e}"))?,
                );
            }
        }
        if data.len() - before != cols {
            return Err(format!(
                "row {i} has {} columns, expected {cols}",
                data.len() - before
            ));
        }
    }
    if data.len() != rows * cols {
        return Err(format!("expected {rows} rows"));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// File-name-safe form of an identifier.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
