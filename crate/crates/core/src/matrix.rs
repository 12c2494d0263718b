//! Matrix storage, the on-disk matrix formats, and data preprocessing
//! (double centering, scaling, session splitting).
//!
//! Two formats are supported. `bin` is a little-endian binary layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TICA"
//! 4       1     format version (1)
//! 5       3     reserved, zero
//! 8       8     rows  (u64 LE)
//! 16      8     cols  (u64 LE)
//! 24      8·r·c values (f64 LE, row-major)
//! ```
//!
//! `csv` is one matrix row per line, comma separated, no header.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TicaError};

/// Dense real matrix; the carrier for data, sources and mixing matrices.
pub type Matrix = DMatrix<f64>;

pub const BIN_MAGIC: [u8; 4] = *b"TICA";
pub const BIN_VERSION: u8 = 1;
pub const BIN_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Bin,
}

impl FromStr for MatrixFormat {
    type Err = TicaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(MatrixFormat::Csv),
            "bin" => Ok(MatrixFormat::Bin),
            other => Err(TicaError::Format(format!("unknown matrix format {other:?}"))),
        }
    }
}

/// Checks the matrix invariants: non-empty and finite.
pub fn validate(m: &Matrix) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(TicaError::Format(format!(
            "matrix must be non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        // nalgebra storage is column-major
        let (r, c) = (pos % m.nrows(), pos / m.nrows());
        return Err(TicaError::Format(format!("non-finite value at ({r}, {c})")));
    }
    Ok(())
}

pub fn encode_bin(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(BIN_HEADER_LEN + 8 * m.len());
    out.extend_from_slice(&BIN_MAGIC);
    out.push(BIN_VERSION);
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn decode_bin(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < BIN_HEADER_LEN {
        return Err(TicaError::Format(format!(
            "bin matrix truncated: {} bytes, header needs {BIN_HEADER_LEN}",
            bytes.len()
        )));
    }
    if bytes[0..4] != BIN_MAGIC {
        return Err(TicaError::Format("bad magic, expected \"TICA\"".into()));
    }
    if bytes[4] != BIN_VERSION {
        return Err(TicaError::Format(format!(
            "unsupported bin version {}",
            bytes[4]
        )));
    }
    if bytes[5..8] != [0, 0, 0] {
        return Err(TicaError::Format("reserved header bytes must be zero".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = &bytes[BIN_HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| TicaError::Format(format!("dimensions {rows}x{cols} overflow")))?;
    if expected != payload.len() as u64 {
        return Err(TicaError::Format(format!(
            "header says {rows}x{cols} ({expected} payload bytes) but payload has {}",
            payload.len()
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut values = payload
        .chunks_exact(8)
        .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()));
    let m = Matrix::from_fn(rows, cols, |_, _| 0.0);
    let mut m = m;
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = values.next().unwrap();
        }
    }
    validate(&m)?;
    Ok(m)
}

pub fn parse_csv(text: &str) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| TicaError::Format(format!("csv line {}: {e}", line + 1)))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                cell.parse::<f64>().map_err(|_| {
                    TicaError::Format(format!(
                        "csv line {}, column {}: {cell:?} is not a number",
                        line + 1,
                        col + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(TicaError::Format(format!(
                    "csv line {} has {} columns, expected {}",
                    line + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(TicaError::Format("csv matrix is empty".into()));
    }
    let m = Matrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c]);
    validate(&m)?;
    Ok(m)
}

/// Renders a matrix as csv. Values use the shortest representation that
/// parses back to the identical `f64`.
pub fn format_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&m[(r, c)].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn read_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TicaError::io(path, e))?;
    match format {
        MatrixFormat::Bin => decode_bin(&bytes),
        MatrixFormat::Csv => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| TicaError::Format(format!("{} is not utf-8", path.display())))?;
            parse_csv(text)
        }
    }
}

pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        MatrixFormat::Bin => encode_bin(m),
        MatrixFormat::Csv => format_csv(m).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| TicaError::io(path, e))
}

/// How the doubly centred data are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Mean over locations of the temporal sample SD, measured before centering.
    #[default]
    TemporalSd,
    /// Sample SD of all entries of the doubly centred data.
    ImageSd,
}

/// Doubly centred, scaled data.
#[derive(Debug, Clone)]
pub struct ScaledData {
    pub data: Matrix,
    pub scale_factor: f64,
}

/// Removes each column's temporal mean, then each row's spatial mean.
pub fn double_center(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let row_means = out.column_mean();
    for mut col in out.column_iter_mut() {
        col -= &row_means;
    }
    out
}

fn sample_sd(values: impl ExactSizeIterator<Item = f64> + Clone) -> f64 {
    let n = values.len() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

pub fn center_scale(x: &Matrix) -> Result<ScaledData> {
    center_scale_with(x, Scaling::TemporalSd)
}

pub fn center_scale_with(x: &Matrix, scaling: Scaling) -> Result<ScaledData> {
    let (t, v) = x.shape();
    if t < 2 || v < 2 {
        return Err(TicaError::DegenerateInput(format!(
            "centering needs at least 2x2 data, got {t}x{v}"
        )));
    }
    let centered = double_center(x);
    let scale_factor = match scaling {
        Scaling::TemporalSd => {
            x.column_iter()
                .map(|col| sample_sd(col.iter().copied()))
                .sum::<f64>()
                / v as f64
        }
        Scaling::ImageSd => sample_sd(centered.iter().copied()),
    };
    if !(scale_factor > 0.0) || !scale_factor.is_finite() {
        return Err(TicaError::DegenerateInput(
            "data are constant in time at every location".into(),
        ));
    }
    Ok(ScaledData {
        data: centered / scale_factor,
        scale_factor,
    })
}

/// Splits a scan into two equal-length halves; an odd trailing row is dropped.
pub fn split_sessions(x: &Matrix) -> Result<(Matrix, Matrix)> {
    let t = x.nrows();
    if t < 4 {
        return Err(TicaError::DegenerateInput(format!(
            "splitting needs at least 4 time points, got {t}"
        )));
    }
    let half = t / 2;
    Ok((x.rows(0, half).into_owned(), x.rows(half, half).into_owned()))
}
