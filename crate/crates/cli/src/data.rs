//! Data ingestion: comma-separated text with header `x_1,...,x_d,y`.

use pkcal_core::{Error, Result};
use std::path::Path;

/// Reads a design/response table, checking the header and every cell.
pub fn load_data(path: &Path, dim: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!(
            "cannot open data file '{}': {e}",
            path.display()
        ))))?;
    let headers = reader
        .headers()
        .map_err(|e| data_err(path, format!("bad header: {e}")))?
        .clone();
    let mut expect: Vec<String> = (1..=dim).map(|j| format!("x_{j}")).collect();
    expect.push("y".into());
    let got: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    if got != expect {
        return Err(data_err(
            path,
            format!("header is {got:?}, expected {expect:?}"),
        ));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(path, format!("row {}: {e}", idx + 2)))?;
        if record.len() != dim + 1 {
            return Err(data_err(
                path,
                format!("row {} has {} columns, expected {}", idx + 2, record.len(), dim + 1),
            ));
        }
        let mut row = Vec::with_capacity(dim);
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                data_err(
                    path,
                    format!("row {} column {}: '{cell}' is not a number", idx + 2, col + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(data_err(
                    path,
                    format!("row {} column {}: non-finite value {v}", idx + 2, col + 1),
                ));
            }
            if col < dim {
                row.push(v);
            } else {
                ys.push(v);
            }
        }
        xs.push(row);
    }
    if xs.is_empty() {
        return Err(data_err(path, "no data rows".into()));
    }
    Ok((xs, ys))
}

fn data_err(path: &Path, msg: String) -> Error {
    Error::Io(std::io::Error::other(format!(
        "data file '{}': {msg}",
        path.display()
    )))
}
