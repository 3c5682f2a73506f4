//! Compressed sparse column matrices and the handful of kernels the solver needs.

/// Sparse matrix in compressed-sparse-column form.
///
/// Row indices within each column are strictly increasing. Entries may be
/// zero-valued; the pattern is what matters for factorization reuse.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Build from (row, col, value) triplets. Duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of {nrows}x{ncols}");
        }
        // count per column, then bucket-sort by column with rows sorted per column
        let mut count = vec![0usize; ncols + 1];
        for &(_, c, _) in triplets {
            count[c + 1] += 1;
        }
        for c in 0..ncols {
            count[c + 1] += count[c];
        }
        let mut entries: Vec<(usize, f64)> = vec![(0, 0.0); triplets.len()];
        let mut next = count.clone();
        for &(r, c, v) in triplets {
            entries[next[c]] = (r, v);
            next[c] += 1;
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        for c in 0..ncols {
            let seg = &mut entries[count[c]..count[c + 1]];
            seg.sort_unstable_by_key(|&(r, _)| r);
            let mut last: Option<usize> = None;
            for &(r, v) in seg.iter() {
                if last == Some(r) {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix { nrows, ncols, col_ptr, row_idx, values }
    }

    pub fn zero(nrows: usize, ncols: usize) -> Self {
        CscMatrix { nrows, ncols, col_ptr: vec![0; ncols + 1], row_idx: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        CscMatrix {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterate the entries of one column as (row, value) pairs.
    pub fn col_iter(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()].iter().zip(&self.values[range]).map(|(&r, &v)| (r, v))
    }

    /// y += A x
    pub fn mul_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[p]] += self.values[p] * xc;
            }
        }
    }

    /// y += Aᵀ x (column dot products)
    pub fn mul_transpose_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                acc += self.values[p] * x[self.row_idx[p]];
            }
            y[c] += acc;
        }
    }

    /// Transpose into a new CSC matrix.
    pub fn transpose(&self) -> CscMatrix {
        let mut count = vec![0usize; self.nrows + 1];
        for &r in &self.row_idx {
            count[r + 1] += 1;
        }
        for r in 0..self.nrows {
            count[r + 1] += count[r];
        }
        let mut row_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = count.clone();
        for c in 0..self.ncols {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let q = next[r];
                row_idx[q] = c;
                values[q] = self.values[p];
                next[r] += 1;
            }
        }
        CscMatrix { nrows: self.ncols, ncols: self.nrows, col_ptr: count, row_idx, values }
    }

    /// Per-column infinity norm.
    pub fn col_norms_inf(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.ncols);
        for c in 0..self.ncols {
            let mut m = 0.0f64;
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                m = m.max(self.values[p].abs());
            }
            out[c] = m;
        }
    }

    /// Per-row infinity norm accumulated into `out` (caller zeroes it).
    pub fn row_norms_inf(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.nrows);
        for p in 0..self.nnz() {
            let r = self.row_idx[p];
            out[r] = out[r].max(self.values[p].abs());
        }
    }

    /// A ← diag(left) · A · diag(right)
    pub fn scale(&mut self, left: &[f64], right: &[f64]) {
        debug_assert_eq!(left.len(), self.nrows);
        debug_assert_eq!(right.len(), self.ncols);
        for c in 0..self.ncols {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                self.values[p] *= left[self.row_idx[p]] * right[c];
            }
        }
    }

    /// Dense column-major copy (for small verification work only).
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows * self.ncols];
        for c in 0..self.ncols {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                out[c * self.nrows + self.row_idx[p]] = self.values[p];
            }
        }
        out
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let a = CscMatrix::from_triplets(3, 2, &[(2, 0, 1.0), (0, 0, 2.0), (2, 0, 0.5), (1, 1, -1.0)]);
        assert_eq!(a.col_ptr(), &[0, 2, 3]);
        assert_eq!(a.row_idx(), &[0, 2, 1]);
        assert_eq!(a.values(), &[2.0, 1.5, -1.0]);
    }

    #[test]
    fn matvec_and_transpose_agree() {
        let a = CscMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (1, 0, 2.0), (0, 2, 3.0), (1, 1, 4.0)]);
        let x = [1.0, -1.0, 2.0];
        let mut y = vec![0.0; 2];
        a.mul_add(&x, &mut y);
        assert_eq!(y, vec![7.0, -2.0]);

        let at = a.transpose();
        let mut y2 = vec![0.0; 2];
        let xt = [1.0, -1.0, 2.0];
        at.mul_transpose_add(&xt, &mut y2);
        assert_eq!(y2, y);

        let w = [0.5, 0.25];
        let mut z1 = vec![0.0; 3];
        a.mul_transpose_add(&w, &mut z1);
        let mut z2 = vec![0.0; 3];
        at.mul_add(&w, &mut z2);
        assert_eq!(z1, z2);
    }
}
