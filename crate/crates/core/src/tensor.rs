//! Dense matrix type and the QPTN binary tensor format.
//!
//! Matrices are stored row-major in 32-bit floats; every reduction (dot
//! products, matrix products) accumulates in 64-bit intermediates.
//!
//! Orientation convention used throughout the crate: a weight matrix `W` is
//! `d_in x d_out`, so its columns are the independent per-output problems,
//! and an activation matrix `X` is `n_tokens x d_in`.
//!
//! QPTN file layout (all integers little-endian):
//!
//! ```text
//! magic "QPTN" (4 bytes) | version u32 = 1 | ndim u32 = 2
//! | dim0 u64 (rows) | dim1 u64 (cols) | payload f32 LE row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const QPTN_MAGIC: [u8; 4] = *b"QPTN";
pub const QPTN_VERSION: u32 = 1;

/// Immutable 2-D array of `f32` values, row-major.
///
/// All entries are finite after construction; operations that could produce
/// non-finite values return an error instead.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at flat index {}",
                data[pos], pos
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    /// Contiguous row slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies column `c` into a new vector.
    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Lifts the payload to `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Reads a matrix from a QPTN file.
///
/// Truncated payloads surface as I/O errors, malformed headers as format
/// errors, and non-finite payload values as validation errors.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != QPTN_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))?;
    if version != QPTN_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} in {}",
            version,
            path.display()
        )));
    }
    let ndim = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))?;
    if ndim != 2 {
        return Err(Error::Format(format!(
            "expected 2 dimensions, file declares {}",
            ndim
        )));
    }
    let rows = r
        .read_u64::<LittleEndian>()
        .map_err(|e| Error::io(path, e))? as usize;
    let cols = r
        .read_u64::<LittleEndian>()
        .map_err(|e| Error::io(path, e))? as usize;

    let len = rows.checked_mul(cols).ok_or_else(|| {
        Error::Format(format!("dimension overflow {}x{}", rows, cols))
    })?;
    let expected = 28u64 + 4 * len as u64;
    let actual = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if actual < expected {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("payload truncated: {actual} bytes, header implies {expected}"),
            ),
        ));
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after declared payload",
            actual - expected
        )));
    }
    let mut data = vec![0.0f32; len];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|e| Error::io(path, e))?;

    DenseMatrix::new(rows, cols, data)
}

/// Writes a matrix as a QPTN file; round-trips bit-exactly with [`read_tensor`].
pub fn write_tensor(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);

    w.write_all(&QPTN_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_u32::<LittleEndian>(QPTN_VERSION)
        .map_err(|e| Error::io(path, e))?;
    w.write_u32::<LittleEndian>(2).map_err(|e| Error::io(path, e))?;
    w.write_u64::<LittleEndian>(m.rows() as u64)
        .map_err(|e| Error::io(path, e))?;
    w.write_u64::<LittleEndian>(m.cols() as u64)
        .map_err(|e| Error::io(path, e))?;
    for &v in m.data() {
        w.write_f32::<LittleEndian>(v)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Matrix product `a * b` with 64-bit accumulation.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0f32; m * n];

    // Each output row is accumulated sequentially in f64, so the result is
    // identical regardless of how rows are distributed across threads.
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        let mut acc = vec![0.0f64; n];
        let a_row = a.row(i);
        for (kk, &aik) in a_row.iter().enumerate() {
            let aik = aik as f64;
            if aik == 0.0 {
                continue;
            }
            let b_row = b.row(kk);
            for (j, &bkj) in b_row.iter().enumerate() {
                acc[j] += aik * bkj as f64;
            }
        }
        for (o, &v) in out_row.iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    });

    DenseMatrix::new(m, n, out)
}
