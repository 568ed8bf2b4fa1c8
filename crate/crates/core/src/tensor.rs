//! Dense row-major matrices and the handful of linear-algebra routines the
//! attention code needs.
//!
//! Also home of the `TATT` binary interchange format used to exchange
//! matrices with other implementations:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TATT"
//! 4       1     version (1)
//! 5       1     dtype (1 = f64 little-endian)
//! 6       2     padding (zero)
//! 8       8     rows (u64 LE)
//! 16      8     cols (u64 LE)
//! 24      8*r*c payload, row-major f64 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TATT_MAGIC: &[u8; 4] = b"TATT";
pub const TATT_VERSION: u8 = 1;
pub const TATT_DTYPE_F64: u8 = 1;

/// Default guard used by [`row_l2_normalize`] callers.
pub const NORM_GUARD: f64 = 1e-12;

/// Default relative tolerance for [`numerical_rank`].
pub const RANK_TOL_SCALE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected (and reordered) by `idx`.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// ‖self − other‖_F / max(‖other‖_F, tiny).
    pub fn rel_frobenius_err(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn write_tatt<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TATT_MAGIC)?;
        w.write_all(&[TATT_VERSION, TATT_DTYPE_F64, 0, 0])?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_tatt<R: Read>(mut r: R) -> Result<Mat> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
        if &header[0..4] != TATT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if header[4] != TATT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", header[4])));
        }
        if header[5] != TATT_DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype {}", header[5])));
        }
        let rows = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let cols = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let len = rows
            .checked_mul(cols)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::Format(format!("{rows}x{cols} too large")))?;
        let mut payload = vec![0u8; len * 8];
        r.read_exact(&mut payload)
            .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Mat::from_vec(rows as usize, cols as usize, data)
    }

    pub fn save_tatt(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_tatt(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_tatt(path: impl AsRef<Path>) -> Result<Mat> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Mat::read_tatt(std::io::BufReader::new(file))
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Divides each row by `max(‖row‖₂, guard)`.
pub fn row_l2_normalize(m: &Mat, guard: f64) -> Result<Mat> {
    if !(guard > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "normalization guard must be positive, got {guard}"
        )));
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let scale = 1.0 / l2_norm(row).max(guard);
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// Rank by Gaussian elimination with partial pivoting. A pivot counts when
/// its magnitude exceeds `tol_scale * max|m| * max(rows, cols)`.
pub fn numerical_rank(m: &Mat, tol_scale: f64) -> Result<usize> {
    if !(tol_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rank tolerance must be positive, got {tol_scale}"
        )));
    }
    if m.rows == 0 || m.cols == 0 {
        return Ok(0);
    }
    let max_abs = m.max_abs();
    if max_abs == 0.0 {
        return Ok(0);
    }
    let threshold = tol_scale * max_abs * m.rows.max(m.cols) as f64;
    let mut a = m.clone();
    let cols = a.cols;
    let mut rank = 0;
    for col in 0..cols {
        if rank == a.rows {
            break;
        }
        let (pivot_row, pivot_abs) = (rank..a.rows)
            .map(|r| (r, a.get(r, col).abs()))
            .fold((rank, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs <= threshold {
            continue;
        }
        if pivot_row != rank {
            for j in 0..cols {
                a.data.swap(rank * cols + j, pivot_row * cols + j);
            }
        }
        let pivot = a.get(rank, col);
        for r in rank + 1..a.rows {
            let factor = a.get(r, col) / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..cols {
                let v = a.get(r, j) - factor * a.get(rank, j);
                a.set(r, j, v);
            }
        }
        rank += 1;
    }
    Ok(rank)
}
