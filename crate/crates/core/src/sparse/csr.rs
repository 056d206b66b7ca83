use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column indices, stored as `u16` whenever the column count allows it.
#[derive(Clone, Debug, PartialEq)]
pub enum ColIndices {
    Narrow(Vec<u16>),
    Wide(Vec<u32>),
}

impl ColIndices {
    fn with_capacity(cols: usize, n: usize) -> Self {
        if cols <= 1 << 16 {
            ColIndices::Narrow(Vec::with_capacity(n))
        } else {
            ColIndices::Wide(Vec::with_capacity(n))
        }
    }

    fn push(&mut self, j: usize) {
        match self {
            ColIndices::Narrow(v) => v.push(j as u16),
            ColIndices::Wide(v) => v.push(j as u32),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ColIndices::Narrow(v) => v.len(),
            ColIndices::Wide(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, k: usize) -> usize {
        match self {
            ColIndices::Narrow(v) => v[k] as usize,
            ColIndices::Wide(v) => v[k] as usize,
        }
    }

    /// Bytes per stored index.
    pub fn width(&self) -> usize {
        match self {
            ColIndices::Narrow(_) => 2,
            ColIndices::Wide(_) => 4,
        }
    }
}

/// Compressed sparse rows with `f32` values and `u32` row pointers.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<u32>,
    col_idx: ColIndices,
    values: Vec<f32>,
}

trait Index: Copy {
    fn at(self) -> usize;
}

impl Index for u16 {
    fn at(self) -> usize {
        self as usize
    }
}

impl Index for u32 {
    fn at(self) -> usize {
        self as usize
    }
}

impl CsrMatrix {
    /// Builds from row-major `rows × cols` values, keeping entries whose
    /// mask is nonzero and whose `f32` value is nonzero.
    pub fn from_dense(rows: usize, cols: usize, values: &[f64], mask: &[f64]) -> Result<Self> {
        if values.len() != rows * cols || mask.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values and mask entries, got {} and {}",
                rows * cols,
                values.len(),
                mask.len()
            )));
        }
        let keep = |k: usize| mask[k] != 0.0 && values[k] as f32 != 0.0;
        let nnz = (0..values.len()).filter(|&k| keep(k)).count();
        if nnz > u32::MAX as usize {
            return Err(Error::Contract("too many nonzeros for 32-bit row pointers".into()));
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = ColIndices::with_capacity(cols, nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for i in 0..rows {
            for j in 0..cols {
                let k = i * cols + j;
                if keep(k) {
                    col_idx.push(j);
                    vals.push(values[k] as f32);
                }
            }
            row_ptr.push(vals.len() as u32);
        }
        Ok(Self { rows, cols, row_ptr, col_idx, values: vals })
    }

    /// Assembles from raw arrays, checking every structural invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        row_ptr: Vec<u32>,
        col_idx: ColIndices,
        values: Vec<f32>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::Format(format!("invalid CSR: {m}")));
        if row_ptr.len() != rows + 1 || row_ptr[0] != 0 {
            return bad("row pointer length or origin".into());
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return bad("row pointers decrease".into());
        }
        let nnz = row_ptr[rows] as usize;
        if col_idx.len() != nnz || values.len() != nnz {
            return bad(format!("nnz {nnz} vs {} indices and {} values", col_idx.len(), values.len()));
        }
        if matches!(col_idx, ColIndices::Narrow(_)) != (cols <= 1 << 16) {
            return bad("index width does not match column count".into());
        }
        for i in 0..rows {
            let (a, b) = (row_ptr[i] as usize, row_ptr[i + 1] as usize);
            for k in a..b {
                if col_idx.get(k) >= cols || (k > a && col_idx.get(k) <= col_idx.get(k - 1)) {
                    return bad(format!("column indices of row {i} out of range or not increasing"));
                }
            }
        }
        if values.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return bad("stored values must be finite and nonzero".into());
        }
        Ok(Self { rows, cols, row_ptr, col_idx, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[u32] {
        &self.row_ptr
    }

    pub fn col_indices(&self) -> &ColIndices {
        &self.col_idx
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Fraction of the `rows × cols` entries not stored.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.nnz() as f64 / (self.rows * self.cols) as f64
    }

    /// Storage of values, indices and row pointers.
    pub fn memory_bytes(&self) -> usize {
        self.nnz() * (4 + self.col_idx.width()) + 4 * self.row_ptr.len()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for k in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                out[i * self.cols + self.col_idx.get(k)] = self.values[k] as f64;
            }
        }
        Tensor::from_parts(vec![self.rows, self.cols], out)
    }

    /// `A x` for a vector `x` of length `cols`.
    pub fn spmv(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [self.cols] {
            return Err(Error::Contract(format!(
                "spmv: {}x{} matrix with vector of shape {:?}",
                self.rows,
                self.cols,
                x.shape()
            )));
        }
        let y = self.spmm(&x.reshape(&[self.cols, 1])?)?;
        y.reshape(&[self.rows])
    }

    /// `A X` for a `cols × n` matrix `X`, accumulated in `f64`.
    pub fn spmm(&self, x: &Tensor) -> Result<Tensor> {
        let n = match x.shape() {
            [k, n] if *k == self.cols => *n,
            s => {
                return Err(Error::Contract(format!(
                    "spmm: {}x{} matrix with operand of shape {s:?}",
                    self.rows, self.cols
                )))
            }
        };
        let xd = x.data();
        let mut out = vec![0.0; self.rows * n];
        for i in 0..self.rows {
            let row = &mut out[i * n..(i + 1) * n];
            for k in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                let a = self.values[k] as f64;
                let src = &xd[self.col_idx.get(k) * n..][..n];
                for (o, &v) in row.iter_mut().zip(src) {
                    *o += a * v;
                }
            }
        }
        Ok(Tensor::from_parts(vec![self.rows, n], out))
    }

    /// `out = A X` in `f32`, `X` row-major `cols × n`. Unchecked shapes.
    pub(crate) fn spmm_f32(&self, x: &[f32], n: usize, out: &mut [f32]) {
        match &self.col_idx {
            ColIndices::Narrow(idx) => self.spmm_kernel(idx, x, n, out),
            ColIndices::Wide(idx) => self.spmm_kernel(idx, x, n, out),
        }
    }

    fn spmm_kernel<I: Index>(&self, idx: &[I], x: &[f32], n: usize, out: &mut [f32]) {
        out.fill(0.0);
        for i in 0..self.rows {
            let row = &mut out[i * n..(i + 1) * n];
            let (a, b) = (self.row_ptr[i] as usize, self.row_ptr[i + 1] as usize);
            for (&j, &v) in idx[a..b].iter().zip(&self.values[a..b]) {
                let src = &x[j.at() * n..][..n];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }
}

/// CSR of a 2-D (or flattened higher-rank) weight under a mask of the same shape.
pub fn csr_from_dense(weights: &Tensor, mask: &Tensor) -> Result<CsrMatrix> {
    weights.expect_same_shape(mask)?;
    let rows = weights.shape()[0];
    let cols = weights.len() / rows;
    CsrMatrix::from_dense(rows, cols, weights.data(), mask.data())
}
