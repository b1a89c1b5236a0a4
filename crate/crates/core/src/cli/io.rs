//! CSV matrix files.
//!
//! Numbers are written in Rust's shortest round-trip form, adjacency entries
//! as `0`/`1`. Locations in error messages are 1-based file positions
//! (line, field).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{AdjacencyMatrix, ZScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    /// Finite reals, optional header row.
    Z,
    /// 0/1 entries, optional header row.
    Adjacency,
    /// Finite reals with a header row of feature names and a first column
    /// of sample IDs. Nonnegativity is checked where it matters (mCLR).
    Abundance,
}

/// A parsed matrix with its optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub values: Array2<f64>,
    pub header: Option<Vec<String>>,
    pub row_ids: Option<Vec<String>>,
}

fn parse_cell(s: &str, line: usize, field: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Parse {
        row: line,
        col: field,
        message: format!("cannot parse {:?} as a number: {e}", s.trim()),
    })
}

pub fn read_matrix(path: &Path, kind: MatrixKind) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_matrix(&text, kind)
}

pub fn parse_matrix(text: &str, kind: MatrixKind) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            col: 0,
            message: e.to_string(),
        })?;
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        records.push(rec.iter().map(str::to_owned).collect::<Vec<String>>());
    }
    if records.is_empty() {
        return Err(Error::Input("matrix file is empty".into()));
    }
    let has_header = match kind {
        MatrixKind::Abundance => true,
        _ => records[0].iter().any(|c| c.trim().parse::<f64>().is_err()),
    };
    let header = has_header.then(|| records[0].iter().map(|c| c.trim().to_owned()).collect::<Vec<_>>());
    let body = &records[usize::from(has_header)..];
    if body.is_empty() {
        return Err(Error::Input("matrix file has no data rows".into()));
    }
    let skip = usize::from(kind == MatrixKind::Abundance);
    let width = body[0].len();
    if width <= skip {
        return Err(Error::Input("matrix file has no data columns".into()));
    }
    let ncols = width - skip;
    let mut data = Vec::with_capacity(body.len() * ncols);
    let mut row_ids = Vec::new();
    for (r, rec) in body.iter().enumerate() {
        let line = r + 1 + usize::from(has_header);
        if rec.len() != width {
            return Err(Error::Parse {
                row: line,
                col: rec.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        if skip == 1 {
            row_ids.push(rec[0].trim().to_owned());
        }
        for (c, cell) in rec.iter().enumerate().skip(skip) {
            let v = parse_cell(cell, line, c + 1)?;
            let bad = match kind {
                MatrixKind::Z => (!v.is_finite()).then(|| format!("non-finite z-score {v}")),
                MatrixKind::Adjacency => (v != 0.0 && v != 1.0).then(|| format!("adjacency entry {v} is not 0 or 1")),
                MatrixKind::Abundance => (!v.is_finite()).then(|| format!("non-finite abundance {v}")),
            };
            if let Some(message) = bad {
                return Err(Error::Validation { row: line, col: c + 1, message });
            }
            data.push(v);
        }
    }
    let values = Array2::from_shape_vec((body.len(), ncols), data).expect("rectangular by construction");
    Ok(Table {
        values,
        header,
        row_ids: (skip == 1).then_some(row_ids),
    })
}

pub fn read_z(path: &Path) -> Result<ZScoreMatrix> {
    ZScoreMatrix::new(read_matrix(path, MatrixKind::Z)?.values)
}

pub fn read_adjacency(path: &Path) -> Result<AdjacencyMatrix> {
    let t = read_matrix(path, MatrixKind::Adjacency)?;
    AdjacencyMatrix::new(t.values.mapv(|v| v as u8))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

/// Writes a real matrix, one row per line, with an optional header.
pub fn write_matrix(path: &Path, values: &Array2<f64>, header: Option<&[String]>) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    create(path)?.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Writes a 0/1 matrix.
pub fn write_binary(path: &Path, values: &Array2<u8>) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 2);
    for row in values.rows() {
        let cells: Vec<&str> = row.iter().map(|&v| if v != 0 { "1" } else { "0" }).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    create(path)?.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Writes a table with a header and a leading string ID column.
pub fn write_abundance(path: &Path, ids: &[String], names: &[String], values: &Array2<f64>) -> Result<()> {
    let mut out = String::from("id,");
    out.push_str(&names.join(","));
    out.push('\n');
    for (id, row) in ids.iter().zip(values.rows()) {
        out.push_str(id);
        for v in row {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    create(path)?.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Writes block labels as a single headed column.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::from("block\n");
    for l in labels {
        out.push_str(&format!("{l}\n"));
    }
    create(path)?.write_all(out.as_bytes()).map_err(io_err(path))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    create(path)?.write_all(text.as_bytes()).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create(path)?.write_all(text.as_bytes()).map_err(io_err(path))
}
