//! Minimal compressed sparse row (CSR) matrix support.
//!
//! This is deliberately small: just the operations the SPDE precision
//! assembly and the Woodbury solver need (assembly from triplets, transpose,
//! products, sums, matrix-vector products). Column indices within each row
//! are kept sorted, and all kernels iterate in a fixed order, so results are
//! bit-for-bit deterministic.

use crate::error::{Error, Result};

/// Compressed sparse row matrix with f64 entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    /// Row start offsets into `indices`/`values`; length `nrows + 1`.
    indptr: Vec<usize>,
    /// Column indices, sorted within each row.
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from (row, col, value) triplets, summing duplicates.
    /// Entries that sum to exactly zero are kept (pattern callers may rely on
    /// structural zeros), except explicit zero triplets are dropped up front.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(i, j, _) in triplets {
            if i >= nrows || j >= ncols {
                return Err(Error::ShapeMismatch(format!(
                    "triplet ({i}, {j}) outside {nrows}x{ncols} matrix"
                )));
            }
        }
        let mut row_counts = vec![0usize; nrows + 1];
        for &(i, _, _) in triplets {
            row_counts[i + 1] += 1;
        }
        for i in 0..nrows {
            row_counts[i + 1] += row_counts[i];
        }
        // Bucket triplets by row, then sort each row by column and merge.
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0f64; triplets.len()];
        let mut fill = row_counts.clone();
        for &(i, j, v) in triplets {
            let p = fill[i];
            cols[p] = j;
            vals[p] = v;
            fill[i] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for i in 0..nrows {
            scratch.clear();
            for p in row_counts[i]..row_counts[i + 1] {
                scratch.push((cols[p], vals[p]));
            }
            scratch.sort_unstable_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < scratch.len() {
                let col = scratch[k].0;
                let mut sum = 0.0;
                while k < scratch.len() && scratch[k].0 == col {
                    sum += scratch[k].1;
                    k += 1;
                }
                indices.push(col);
                values.push(sum);
            }
            indptr.push(indices.len());
        }
        Ok(Self { nrows, ncols, indptr, indices, values })
    }

    /// Diagonal matrix with the given entries.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// (column indices, values) of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    /// Range of positions row `i` occupies in the flattened value storage.
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.indptr[i]..self.indptr[i + 1]
    }

    /// Flat view of all stored values in row-major CSR order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at (i, j), zero if not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// Main diagonal as a dense vector.
    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.nrows.min(self.ncols);
        (0..n).map(|i| self.get(i, i)).collect()
    }

    /// Multiplies every stored value by `s`.
    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.nrows];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[i] = acc;
        }
        y
    }

    /// y = Aᵀ x, computed by row-ordered scatter (deterministic).
    pub fn tmatvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows, "tmatvec dimension mismatch");
        let mut y = vec![0.0; self.ncols];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let xi = x[i];
            for (c, v) in cols.iter().zip(vals) {
                y[*c] += v * xi;
            }
        }
        y
    }

    /// Aᵀ as a new matrix.
    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut indptr = counts.clone();
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0f64; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                let p = indptr[*c];
                indices[p] = i;
                values[p] = *v;
                indptr[*c] += 1;
            }
        }
        // Rows of the transpose were filled in ascending source-row order, so
        // indices are already sorted.
        SparseMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr: counts,
            indices,
            values,
        }
    }

    /// C = self + s * other (same shape).
    pub fn add_scaled(&self, s: f64, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(Error::ShapeMismatch(format!(
                "add: {}x{} vs {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let mut indptr = Vec::with_capacity(self.nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..self.nrows {
            let (ca, va) = self.row(i);
            let (cb, vb) = other.row(i);
            let (mut pa, mut pb) = (0, 0);
            while pa < ca.len() || pb < cb.len() {
                let next_a = ca.get(pa).copied().unwrap_or(usize::MAX);
                let next_b = cb.get(pb).copied().unwrap_or(usize::MAX);
                if next_a < next_b {
                    indices.push(next_a);
                    values.push(va[pa]);
                    pa += 1;
                } else if next_b < next_a {
                    indices.push(next_b);
                    values.push(s * vb[pb]);
                    pb += 1;
                } else {
                    indices.push(next_a);
                    values.push(va[pa] + s * vb[pb]);
                    pa += 1;
                    pb += 1;
                }
            }
            indptr.push(indices.len());
        }
        Ok(SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr,
            indices,
            values,
        })
    }

    /// C = self * other (sparse-sparse product, sorted output).
    pub fn matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.ncols != other.nrows {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {}x{} * {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let n = other.ncols;
        let mut indptr = Vec::with_capacity(self.nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        // Dense accumulator per row; cols collected then sorted.
        let mut acc = vec![0f64; n];
        let mut mask = vec![false; n];
        let mut touched: Vec<usize> = Vec::new();
        for i in 0..self.nrows {
            touched.clear();
            let (ca, va) = self.row(i);
            for (k, av) in ca.iter().zip(va) {
                let (cb, vb) = other.row(*k);
                for (j, bv) in cb.iter().zip(vb) {
                    if !mask[*j] {
                        mask[*j] = true;
                        touched.push(*j);
                        acc[*j] = 0.0;
                    }
                    acc[*j] += av * bv;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                indices.push(j);
                values.push(acc[j]);
                mask[j] = false;
            }
            indptr.push(indices.len());
        }
        Ok(SparseMatrix {
            nrows: self.nrows,
            ncols: n,
            indptr,
            indices,
            values,
        })
    }

    /// Scales row i by `d[i]` in place.
    pub fn scale_rows(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.nrows, "scale_rows dimension mismatch");
        for i in 0..self.nrows {
            let lo = self.indptr[i];
            let hi = self.indptr[i + 1];
            for v in &mut self.values[lo..hi] {
                *v *= d[i];
            }
        }
    }

    /// New matrix whose row k is row `rows[k]` of `self` (rows may repeat).
    pub fn select_rows(&self, rows: &[usize]) -> SparseMatrix {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for &r in rows {
            assert!(r < self.nrows, "select_rows: row {r} out of range");
            let (cols, vals) = self.row(r);
            indices.extend_from_slice(cols);
            values.extend_from_slice(vals);
            indptr.push(indices.len());
        }
        SparseMatrix { nrows: rows.len(), ncols: self.ncols, indptr, indices, values }
    }

    /// Dense copy, for oracles and small-scale tests.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                m[(i, *c)] = *v;
            }
        }
        m
    }

    /// True if the stored pattern and values are exactly symmetric.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                if (self.get(*c, i) - v).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}
