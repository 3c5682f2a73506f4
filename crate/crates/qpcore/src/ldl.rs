//! Sparse LDLᵀ factorization without pivoting.
//!
//! Operates on the upper triangle of a symmetric matrix in CSC form. The
//! solver only feeds it symmetric quasi-definite KKT matrices, for which the
//! factorization exists for any symmetric permutation, so no pivoting is
//! needed. Symbolic analysis (elimination tree and column counts) is done
//! once; numeric refactorization reuses the pattern.

use crate::csc::CscMatrix;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    parent: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    // scratch
    y: Vec<f64>,
    pattern: Vec<usize>,
    flag: Vec<usize>,
    lnz_cnt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LdlError {
    /// A pivot became exactly zero; the matrix is singular in this ordering.
    ZeroPivot(usize),
    /// The input matrix was not square or not upper-triangular.
    BadInput,
}

impl LdlFactor {
    /// Symbolic analysis of the upper-triangular CSC matrix `a`.
    pub fn symbolic(a: &CscMatrix) -> Result<Self, LdlError> {
        let n = a.ncols();
        if a.nrows() != n {
            return Err(LdlError::BadInput);
        }
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for (i0, _) in a.col_iter(k) {
                if i0 > k {
                    return Err(LdlError::BadInput);
                }
                let mut i = i0;
                while i < k && flag[i] != k {
                    if parent[i] == NONE {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + lnz[k];
        }
        let nnz = l_col_ptr[n];
        Ok(LdlFactor {
            n,
            parent,
            l_col_ptr,
            l_row_idx: vec![0; nnz],
            l_values: vec![0.0; nnz],
            d: vec![0.0; n],
            y: vec![0.0; n],
            pattern: vec![0; n],
            flag,
            lnz_cnt: vec![0; n],
        })
    }

    /// Numeric factorization (reusable after the matrix values change, as
    /// long as the pattern is unchanged).
    pub fn factor(&mut self, a: &CscMatrix) -> Result<(), LdlError> {
        let n = self.n;
        self.flag.iter_mut().for_each(|f| *f = NONE);
        self.lnz_cnt.iter_mut().for_each(|c| *c = 0);
        self.y.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            self.flag[k] = k;
            let mut top = n;
            for (i0, v) in a.col_iter(k) {
                self.y[i0] += v;
                // walk up the etree collecting the pattern of row k of L
                let mut i = i0;
                let mut len = 0usize;
                while i < k && self.flag[i] != k {
                    self.pattern[len] = i;
                    len += 1;
                    self.flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    // reuse the tail of `pattern` as the topological stack
                    let node = self.pattern[len];
                    self.pattern[top] = node;
                }
            }
            let mut dk = self.y[k];
            self.y[k] = 0.0;
            for t in top..n {
                let i = self.pattern[t];
                let yi = self.y[i];
                self.y[i] = 0.0;
                let p_end = self.l_col_ptr[i] + self.lnz_cnt[i];
                for p in self.l_col_ptr[i]..p_end {
                    self.y[self.l_row_idx[p]] -= self.l_values[p] * yi;
                }
                let l_ki = yi / self.d[i];
                dk -= l_ki * yi;
                self.l_row_idx[p_end] = k;
                self.l_values[p_end] = l_ki;
                self.lnz_cnt[i] += 1;
            }
            if dk == 0.0 {
                return Err(LdlError::ZeroPivot(k));
            }
            self.d[k] = dk;
        }
        Ok(())
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn nnz(&self) -> usize {
        self.l_values.len()
    }

    /// Solve (L D Lᵀ) x = b in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for j in 0..self.n {
            let bj = b[j];
            if bj != 0.0 {
                for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                    b[self.l_row_idx[p]] -= self.l_values[p] * bj;
                }
            }
        }
        for j in 0..self.n {
            b[j] /= self.d[j];
        }
        for j in (0..self.n).rev() {
            let mut acc = b[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                acc -= self.l_values[p] * b[self.l_row_idx[p]];
            }
            b[j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_solve_check(upper: &[(usize, usize, f64)], n: usize, b: &[f64]) -> Vec<f64> {
        // build full dense symmetric matrix, solve by Gaussian elimination
        let mut m = vec![0.0f64; n * n];
        for &(i, j, v) in upper {
            m[j * n + i] += v;
            if i != j {
                m[i * n + j] += v;
            }
        }
        let mut aug = m;
        let mut x = b.to_vec();
        for k in 0..n {
            // partial pivot
            let mut piv = k;
            for r in k + 1..n {
                if aug[k * n + r].abs() > aug[k * n + piv].abs() {
                    piv = r;
                }
            }
            if piv != k {
                for c in 0..n {
                    aug.swap(c * n + k, c * n + piv);
                }
                x.swap(k, piv);
            }
            let d = aug[k * n + k];
            for r in k + 1..n {
                let f = aug[k * n + r] / d;
                if f == 0.0 {
                    continue;
                }
                for c in k..n {
                    aug[c * n + r] -= f * aug[c * n + k];
                }
                x[r] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            let mut acc = x[k];
            for c in k + 1..n {
                acc -= aug[c * n + k] * x[c];
            }
            x[k] = acc / aug[k * n + k];
        }
        x
    }

    #[test]
    fn factor_and_solve_quasidefinite() {
        // [[2, 0, 1], [0, 3, -1], [1, -1, -2]] (quasi-definite-like)
        let trips = vec![(0, 0, 2.0), (1, 1, 3.0), (0, 2, 1.0), (1, 2, -1.0), (2, 2, -2.0)];
        let a = CscMatrix::from_triplets(3, 3, &trips);
        let mut f = LdlFactor::symbolic(&a).unwrap();
        f.factor(&a).unwrap();
        let mut b = vec![1.0, 2.0, 3.0];
        let expect = dense_solve_check(&trips, 3, &b);
        f.solve_in_place(&mut b);
        for (got, want) in b.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn refactor_reuses_pattern() {
        let trips1 = vec![(0, 0, 2.0), (0, 1, 0.5), (1, 1, 4.0)];
        let trips2 = vec![(0, 0, 1.0), (0, 1, -0.25), (1, 1, 2.0)];
        let a1 = CscMatrix::from_triplets(2, 2, &trips1);
        let a2 = CscMatrix::from_triplets(2, 2, &trips2);
        let mut f = LdlFactor::symbolic(&a1).unwrap();
        f.factor(&a1).unwrap();
        f.factor(&a2).unwrap();
        let mut b = vec![1.0, 1.0];
        let expect = dense_solve_check(&trips2, 2, &b);
        f.solve_in_place(&mut b);
        for (got, want) in b.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
