//! Dense matrices, the on-disk matrix interchange format and the NNLS kernel.
//!
//! A matrix file is one UTF-8 JSON header line terminated by `\n`,
//! `{"name":…,"rows":…,"cols":…,"dtype":"f32","byte_order":"LE"}`, followed by
//! `rows × cols` little-endian `f32` values in row-major order. Values are
//! computed in `f64` and rounded to `f32` on write.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix(Array2<f64>);

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix(Array2::zeros((rows, cols)))
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(format!("{} values for {rows}x{cols}", rows * cols), data.len()));
        }
        let array = Array2::from_shape_vec((rows, cols), data).expect("shape checked above");
        Self::from_array(array)
    }

    /// Builds a matrix from equally long rows. `cols` is needed for the empty case.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::dims(format!("{cols} columns"), format!("{} in row {i}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_array(array: Array2<f64>) -> Result<Self> {
        if let Some(((i, j), v)) = array.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Precondition(format!("non-finite entry {v} at ({i}, {j})")));
        }
        Ok(DenseMatrix(array))
    }

    /// Wraps an array produced by arithmetic on finite inputs.
    pub(crate) fn from_array_unchecked(array: Array2<f64>) -> Self {
        debug_assert!(array.iter().all(|v| v.is_finite()));
        DenseMatrix(array)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.outer_iter().map(|r| r.to_vec()).collect()
    }

    /// Row-major copy of the entries.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    pub fn min_value(&self) -> Option<f64> {
        self.0.iter().copied().reduce(f64::min)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        DenseMatrix(self.0.select(ndarray::Axis(0), indices))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    rows: u64,
    cols: u64,
    dtype: String,
    byte_order: String,
}

/// Encodes a matrix in the interchange format.
pub fn encode_matrix<W: Write>(m: &DenseMatrix, name: &str, mut out: W) -> Result<()> {
    let header = Header {
        name: name.to_string(),
        rows: m.rows() as u64,
        cols: m.cols() as u64,
        dtype: "f32".into(),
        byte_order: "LE".into(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(m.rows() * m.cols() * 4);
    for &v in m.as_array().iter() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

/// Decodes a matrix and its name from the interchange format.
pub fn decode_matrix<R: BufRead>(mut input: R) -> Result<(String, DenseMatrix)> {
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format("header", "missing newline-terminated header line"));
    }
    line.pop();
    let value: serde_json::Value =
        serde_json::from_slice(&line).map_err(|e| Error::format("header", format!("invalid JSON: {e}")))?;
    let field = |key: &str| value.get(key).ok_or_else(|| Error::format(key, "missing"));
    let name = field("name")?.as_str().ok_or_else(|| Error::format("name", "not a string"))?.to_string();
    let rows = field("rows")?.as_u64().ok_or_else(|| Error::format("rows", "not a non-negative integer"))?;
    let cols = field("cols")?.as_u64().ok_or_else(|| Error::format("cols", "not a non-negative integer"))?;
    match field("dtype")?.as_str() {
        Some("f32") => {}
        other => return Err(Error::format("dtype", format!("unsupported dtype {other:?}"))),
    }
    match field("byte_order")?.as_str() {
        Some("LE") => {}
        other => return Err(Error::format("byte_order", format!("unsupported byte order {other:?}"))),
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::format("rows", "rows x cols overflows"))?;
    let expected = count * 4;
    let mut payload = Vec::with_capacity(expected);
    (&mut input).take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::format("payload", format!("truncated: expected {expected} bytes, found {}", payload.len())));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::format("payload", "trailing bytes after payload"));
    }
    let data: Vec<f64> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("payload", "non-finite value"));
    }
    let m = DenseMatrix::from_vec(rows as usize, cols as usize, data)?;
    Ok((name, m))
}

pub fn write_matrix(m: &DenseMatrix, name: &str, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    encode_matrix(m, name, BufWriter::new(file))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    read_named_matrix(path).map(|(_, m)| m)
}

pub fn read_named_matrix(path: impl AsRef<Path>) -> Result<(String, DenseMatrix)> {
    let file = File::open(path)?;
    decode_matrix(BufReader::new(file))
}

const NNLS_TOL: f64 = 1e-8;
const NNLS_MAX_SWEEPS: usize = 500;

/// Non-negative least squares against a fixed non-negative basis `W` (p×r):
/// `min_u ½‖a − W u‖²` subject to `u ≥ 0`.
///
/// Solved by cyclic coordinate descent with exact per-coordinate
/// minimization clamped at zero. The Gram matrix is computed once so the
/// same problem can be reused across many rows.
#[derive(Debug, Clone)]
pub struct NnlsProblem {
    basis: Array2<f64>,
    gram: Array2<f64>,
}

impl NnlsProblem {
    pub fn new(w: &DenseMatrix) -> Result<Self> {
        if !w.is_nonnegative() {
            return Err(Error::Precondition("NNLS basis W must be elementwise non-negative".into()));
        }
        let basis = w.as_array().clone();
        let gram = basis.t().dot(&basis);
        Ok(NnlsProblem { basis, gram })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Solves for one activation row. `active = Some(ks)` keeps only the
    /// listed coordinates free; all others are fixed at zero.
    pub fn solve(&self, a_row: ArrayView1<'_, f64>, active: Option<&[usize]>) -> Result<Array1<f64>> {
        let r = self.rank();
        if a_row.len() != self.dim() {
            return Err(Error::dims(format!("activation row of length {}", self.dim()), a_row.len()));
        }
        if a_row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("activation row has non-finite entries".into()));
        }
        let all: Vec<usize>;
        let active = match active {
            Some(ks) => {
                if let Some(&k) = ks.iter().find(|&&k| k >= r) {
                    return Err(Error::Precondition(format!("active concept {k} out of range for rank {r}")));
                }
                ks
            }
            None => {
                all = (0..r).collect();
                &all
            }
        };

        let rhs = self.basis.t().dot(&a_row);
        let mut u = Array1::<f64>::zeros(r);
        for _ in 0..NNLS_MAX_SWEEPS {
            let mut max_change = 0.0f64;
            for &k in active {
                let g_kk = self.gram[[k, k]];
                let next = if g_kk > 0.0 {
                    let grad = self.gram.row(k).dot(&u) - rhs[k];
                    (u[k] - grad / g_kk).max(0.0)
                } else {
                    0.0
                };
                max_change = max_change.max((next - u[k]).abs());
                u[k] = next;
            }
            if max_change < NNLS_TOL {
                break;
            }
        }
        Ok(u)
    }

    /// `½‖a − W u‖²`.
    pub fn objective(&self, a_row: ArrayView1<'_, f64>, u: ArrayView1<'_, f64>) -> f64 {
        let recon = self.basis.dot(&u);
        0.5 * a_row.iter().zip(recon.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }
}

/// One-shot NNLS; see [`NnlsProblem`].
pub fn nnls_solve(a_row: &[f64], w: &DenseMatrix, active: Option<&[usize]>) -> Result<Vec<f64>> {
    let problem = NnlsProblem::new(w)?;
    Ok(problem.solve(ArrayView1::from(a_row), active)?.to_vec())
}
