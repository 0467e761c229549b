//! CSR sparse matrices with the exact algebra used for meta-path composition:
//! sparse-sparse products, sparse-dense products, symmetric normalization,
//! linear combination over a shared pattern union and block extraction.
//!
//! Values are nonnegative path weights. Structural zeros are kept: a convex
//! combination with a zero coefficient still contributes its pattern.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("dimension mismatch: left is {0}x{1}, right is {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("entry ({0}, {1}) outside {2}x{3} matrix")]
    OutOfBounds(usize, usize, usize, usize),
}

/// Compressed sparse row matrix over `f64`.
///
/// Invariants: `row_ptr` is monotone with `row_ptr[n_rows] == nnz`, column
/// indices are sorted and duplicate-free within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        SparseMatrix {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Build from (row, col, value) triplets. Duplicate coordinates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, SparseError> {
        for &(i, j, _) in triplets {
            if i >= n_rows || j >= n_cols {
                return Err(SparseError::OutOfBounds(i, j, n_rows, n_cols));
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        row_ptr.push(0usize);
        let mut col_idx: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut cur_row = 0usize;
        for (i, j, v) in sorted {
            while cur_row < i {
                row_ptr.push(col_idx.len());
                cur_row += 1;
            }
            if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == j {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
            }
        }
        while cur_row < n_rows {
            row_ptr.push(col_idx.len());
            cur_row += 1;
        }
        let m = SparseMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        };
        debug_assert!(m.check_invariants());
        Ok(m)
    }

    fn check_invariants(&self) -> bool {
        if self.row_ptr.len() != self.n_rows + 1 {
            return false;
        }
        if *self.row_ptr.last().unwrap() != self.col_idx.len() {
            return false;
        }
        for r in 0..self.n_rows {
            if self.row_ptr[r] > self.row_ptr[r + 1] {
                return false;
            }
            let row = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return false;
                }
            }
        }
        true
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Columns and values of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&j, &v)| (j, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = counts;
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                let slot = next[j];
                col_idx[slot] = i;
                values[slot] = v;
                next[j] += 1;
            }
        }
        SparseMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Exact sparse product. Accumulation per output row follows the fixed
    /// left-row traversal order, so results are bitwise deterministic.
    pub fn spmm(&self, other: &SparseMatrix) -> Result<SparseMatrix, SparseError> {
        if self.n_cols != other.n_rows {
            return Err(SparseError::DimMismatch(
                self.n_rows,
                self.n_cols,
                other.n_rows,
                other.n_cols,
            ));
        }
        let mut row_ptr = Vec::with_capacity(self.n_rows + 1);
        row_ptr.push(0usize);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();

        let mut acc = vec![0.0f64; other.n_cols];
        let mut touched: Vec<usize> = Vec::new();
        let mut seen = vec![false; other.n_cols];
        for i in 0..self.n_rows {
            for (k, va) in self.row(i) {
                for (j, vb) in other.row(k) {
                    if !seen[j] {
                        seen[j] = true;
                        touched.push(j);
                    }
                    acc[j] += va * vb;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                col_idx.push(j);
                values.push(acc[j]);
                acc[j] = 0.0;
                seen[j] = false;
            }
            touched.clear();
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix {
            n_rows: self.n_rows,
            n_cols: other.n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Sparse times row-major dense; deterministic per-row sequential reduction.
    pub fn spmm_dense(&self, x: &[f64], x_cols: usize) -> Result<Vec<f64>, SparseError> {
        if x.len() != self.n_cols * x_cols {
            return Err(SparseError::DimMismatch(
                self.n_rows,
                self.n_cols,
                x.len() / x_cols.max(1),
                x_cols,
            ));
        }
        let mut out = vec![0.0f64; self.n_rows * x_cols];
        for i in 0..self.n_rows {
            let orow = &mut out[i * x_cols..(i + 1) * x_cols];
            for (k, v) in self.row(i) {
                let xrow = &x[k * x_cols..(k + 1) * x_cols];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += v * xv;
                }
            }
        }
        Ok(out)
    }

    /// D^{-1/2} (A [+ I]) D^{-1/2} with D the degree (row-sum) matrix of the
    /// self-loop-augmented operand. Zero-degree rows/columns stay zero.
    pub fn sym_normalize(&self, add_self_loops: bool) -> Result<SparseMatrix, SparseError> {
        if self.n_rows != self.n_cols {
            return Err(SparseError::NotSquare(self.n_rows, self.n_cols));
        }
        let n = self.n_rows;
        let base = if add_self_loops {
            let eye = SparseMatrix::identity(n);
            linear_combination(&[1.0, 1.0], &[self, &eye])?
        } else {
            self.clone()
        };
        let mut scale = vec![0.0f64; n];
        for i in 0..n {
            let deg: f64 = base.row(i).map(|(_, v)| v).sum();
            scale[i] = if deg > 0.0 { deg.powf(-0.5) } else { 0.0 };
        }
        let mut out = base;
        for i in 0..n {
            let lo = out.row_ptr[i];
            let hi = out.row_ptr[i + 1];
            for k in lo..hi {
                let j = out.col_idx[k];
                out.values[k] *= scale[i] * scale[j];
            }
        }
        Ok(out)
    }

    /// Extract the `rows` x `cols` window as its own matrix.
    pub fn block(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> SparseMatrix {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0usize);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in rows.clone() {
            for (j, v) in self.row(i) {
                if j >= cols.start && j < cols.end {
                    col_idx.push(j - cols.start);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            n_rows: rows.len(),
            n_cols: cols.len(),
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Symmetric bipartite embedding `[[0, B], [B^T, 0]]` of an m x n block.
    pub fn bipartite_embed(&self) -> SparseMatrix {
        let (m, n) = (self.n_rows, self.n_cols);
        let t = self.transpose();
        let mut row_ptr = Vec::with_capacity(m + n + 1);
        row_ptr.push(0usize);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..m {
            for (j, v) in self.row(i) {
                col_idx.push(m + j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        for j in 0..n {
            for (i, v) in t.row(j) {
                col_idx.push(i);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            n_rows: m + n,
            n_cols: m + n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for (i, j, v) in self.iter() {
            out[i * self.n_cols + j] = v;
        }
        out
    }

    pub fn from_dense(n_rows: usize, n_cols: usize, data: &[f64]) -> SparseMatrix {
        let mut trip = Vec::new();
        for i in 0..n_rows {
            for j in 0..n_cols {
                let v = data[i * n_cols + j];
                if v != 0.0 {
                    trip.push((i, j, v));
                }
            }
        }
        SparseMatrix::from_triplets(n_rows, n_cols, &trip).unwrap()
    }

    /// True when the matrix equals its transpose exactly.
    pub fn is_symmetric(&self) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        let t = self.transpose();
        self.iter().zip(t.iter()).all(|(a, b)| a == b)
            && self.nnz() == t.nnz()
    }
}

/// Entrywise sum of `coeff[k] * mats[k]`. The result's sparsity pattern is the
/// union of the input patterns even where coefficients are zero.
pub fn linear_combination(
    coeffs: &[f64],
    mats: &[&SparseMatrix],
) -> Result<SparseMatrix, SparseError> {
    assert_eq!(coeffs.len(), mats.len(), "one coefficient per matrix");
    assert!(!mats.is_empty(), "need at least one matrix");
    let (n_rows, n_cols) = (mats[0].n_rows, mats[0].n_cols);
    for m in mats {
        if m.n_rows != n_rows || m.n_cols != n_cols {
            return Err(SparseError::DimMismatch(n_rows, n_cols, m.n_rows, m.n_cols));
        }
    }
    let mut row_ptr = Vec::with_capacity(n_rows + 1);
    row_ptr.push(0usize);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    let mut acc = vec![0.0f64; n_cols];
    let mut seen = vec![false; n_cols];
    let mut touched: Vec<usize> = Vec::new();
    for i in 0..n_rows {
        for (m, &c) in mats.iter().zip(coeffs) {
            for (j, v) in m.row(i) {
                if !seen[j] {
                    seen[j] = true;
                    touched.push(j);
                }
                acc[j] += c * v;
            }
        }
        touched.sort_unstable();
        for &j in &touched {
            col_idx.push(j);
            values.push(acc[j]);
            acc[j] = 0.0;
            seen[j] = false;
        }
        touched.clear();
        row_ptr.push(col_idx.len());
    }
    Ok(SparseMatrix {
        n_rows,
        n_cols,
        row_ptr,
        col_idx,
        values,
    })
}
