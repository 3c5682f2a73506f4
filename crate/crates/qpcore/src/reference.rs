//! Slow dense reference solvers and a seeded problem generator.
//!
//! These exist so the test suites can check the sparse iterative solver
//! against an independent direct route: equality-constrained QPs are solved
//! by one dense KKT factorization, box-constrained QPs by an active-set
//! subspace Newton method. Nothing here shares code with the ADMM path
//! beyond the problem types.

use crate::csc::CscMatrix;
use crate::problem::QpProblem;

/// Column-major dense matrix, just enough for the reference solves.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        DenseMatrix { nrows, ncols, data: vec![0.0; nrows * ncols] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[c * self.nrows + r]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[c * self.nrows + r] = v;
    }

    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[c * self.nrows + r] += v;
    }
}

/// LU factorization with partial pivoting; returns None when singular.
pub fn lu_solve(a: &DenseMatrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.nrows;
    assert_eq!(a.ncols, n);
    assert_eq!(b.len(), n);
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    for k in 0..n {
        let mut piv = k;
        let mut best = m[k * n + k].abs();
        for r in k + 1..n {
            let v = m[k * n + r].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-14 {
            return None;
        }
        if piv != k {
            for c in 0..n {
                m.swap(c * n + k, c * n + piv);
            }
            x.swap(k, piv);
        }
        let d = m[k * n + k];
        for r in k + 1..n {
            let f = m[k * n + r] / d;
            if f == 0.0 {
                continue;
            }
            m[k * n + r] = 0.0;
            for c in k + 1..n {
                m[c * n + r] -= f * m[c * n + k];
            }
            x[r] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut acc = x[k];
        for c in k + 1..n {
            acc -= m[c * n + k] * x[c];
        }
        x[k] = acc / m[k * n + k];
    }
    Some(x)
}

fn dense_quadratic(problem: &QpProblem) -> DenseMatrix {
    let n = problem.num_vars();
    let mut q = DenseMatrix::zeros(n, n);
    for c in 0..n {
        for (r, v) in problem.quadratic_upper.col_iter(c) {
            q.add(r, c, v);
            if r != c {
                q.add(c, r, v);
            }
        }
    }
    q
}

/// Reference solution of an equality-constrained QP (all rows must have
/// `lower == upper`, variables free) via one dense KKT factorization.
pub fn solve_equality_qp_dense(problem: &QpProblem) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = problem.num_vars();
    let m = problem.num_rows();
    for i in 0..m {
        if problem.row_lower[i] != problem.row_upper[i] {
            return None;
        }
    }
    if problem.var_lower.iter().any(|l| l.is_finite())
        || problem.var_upper.iter().any(|u| u.is_finite())
    {
        return None;
    }
    let q = dense_quadratic(problem);
    let dim = n + m;
    let mut kkt = DenseMatrix::zeros(dim, dim);
    for c in 0..n {
        for r in 0..n {
            kkt.set(r, c, q.get(r, c));
        }
    }
    for c in 0..n {
        for (r, v) in problem.rows.col_iter(c) {
            kkt.set(n + r, c, v);
            kkt.set(c, n + r, v);
        }
    }
    let mut rhs = vec![0.0; dim];
    for j in 0..n {
        rhs[j] = -problem.linear[j];
    }
    for i in 0..m {
        rhs[n + i] = problem.row_lower[i];
    }
    let sol = lu_solve(&kkt, &rhs)?;
    Some((sol[..n].to_vec(), sol[n..].to_vec()))
}

/// Reference solution of a strictly convex box-constrained QP (no general
/// rows) by a dense primal-dual interior-point iteration. Returns the primal
/// point; fails (None) if it cannot certify its own KKT conditions.
pub fn solve_box_qp_dense(problem: &QpProblem, tol: f64) -> Option<Vec<f64>> {
    let n = problem.num_vars();
    if problem.num_rows() != 0 {
        return None;
    }
    let q = dense_quadratic(problem);
    let lo = &problem.var_lower;
    let hi = &problem.var_upper;
    if (0..n).any(|j| !(lo[j].is_finite() && hi[j].is_finite() && lo[j] < hi[j])) {
        return None;
    }
    let grad = |x: &[f64]| -> Vec<f64> {
        let mut g = problem.linear.clone();
        for c in 0..n {
            let xc = x[c];
            for r in 0..n {
                g[r] += q.get(r, c) * xc;
            }
        }
        g
    };

    // start strictly interior with unit multipliers
    let mut x: Vec<f64> = (0..n).map(|j| 0.5 * (lo[j] + hi[j])).collect();
    let mut z_lo = vec![1.0; n];
    let mut z_hi = vec![1.0; n];
    for _ in 0..200 {
        let g = grad(&x);
        let mut gap = 0.0;
        for j in 0..n {
            gap += z_lo[j] * (x[j] - lo[j]) + z_hi[j] * (hi[j] - x[j]);
        }
        gap /= 2.0 * n as f64;
        let stat: f64 =
            (0..n).map(|j| (g[j] - z_lo[j] + z_hi[j]).abs()).fold(0.0, f64::max);
        if gap < 1e-13 && stat < 1e-11 * (1.0 + inf_norm_slice(&g)) {
            break;
        }
        let mu = 0.1 * gap;
        // condensed Newton system: (Q + D) dx = rhs
        let mut sys = DenseMatrix::zeros(n, n);
        sys.data.copy_from_slice(&q.data);
        let mut rhs = vec![0.0; n];
        for j in 0..n {
            let s_lo = x[j] - lo[j];
            let s_hi = hi[j] - x[j];
            sys.add(j, j, z_lo[j] / s_lo + z_hi[j] / s_hi);
            rhs[j] = -(g[j] - z_lo[j] + z_hi[j]) + (mu - z_lo[j] * s_lo) / s_lo
                - (mu - z_hi[j] * s_hi) / s_hi;
        }
        let dx = lu_solve(&sys, &rhs)?;
        let mut dz_lo = vec![0.0; n];
        let mut dz_hi = vec![0.0; n];
        for j in 0..n {
            let s_lo = x[j] - lo[j];
            let s_hi = hi[j] - x[j];
            dz_lo[j] = (mu - z_lo[j] * s_lo - z_lo[j] * dx[j]) / s_lo;
            dz_hi[j] = (mu - z_hi[j] * s_hi + z_hi[j] * dx[j]) / s_hi;
        }
        // fraction-to-boundary step
        let mut alpha = 1.0f64;
        for j in 0..n {
            let s_lo = x[j] - lo[j];
            let s_hi = hi[j] - x[j];
            if dx[j] < 0.0 {
                alpha = alpha.min(-0.995 * s_lo / dx[j]);
            }
            if dx[j] > 0.0 {
                alpha = alpha.min(0.995 * s_hi / dx[j]);
            }
            if dz_lo[j] < 0.0 {
                alpha = alpha.min(-0.995 * z_lo[j] / dz_lo[j]);
            }
            if dz_hi[j] < 0.0 {
                alpha = alpha.min(-0.995 * z_hi[j] / dz_hi[j]);
            }
        }
        for j in 0..n {
            x[j] += alpha * dx[j];
            z_lo[j] += alpha * dz_lo[j];
            z_hi[j] += alpha * dz_hi[j];
        }
    }
    for j in 0..n {
        x[j] = x[j].clamp(lo[j], hi[j]);
    }
    // certify KKT: projected gradient must vanish (relative tolerance)
    let g = grad(&x);
    let scale = 1.0 + inf_norm_slice(&g);
    for j in 0..n {
        let pg = if x[j] <= lo[j] + 1e-9 {
            g[j].min(0.0)
        } else if x[j] >= hi[j] - 1e-9 {
            g[j].max(0.0)
        } else {
            g[j]
        };
        if pg.abs() > tol * scale {
            return None;
        }
    }
    Some(x)
}

fn inf_norm_slice(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Deterministic 64-bit generator (splitmix64) for the seeded test problems.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// Kind of randomly generated test problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestProblemKind {
    /// Strictly convex objective, equality rows only.
    Equality,
    /// Strictly convex objective, finite variable bounds only.
    Box,
}

/// Generate a random PSD test QP with the given seed. Sizes stay within
/// `max_vars`. Equality instances always have full-row-rank constraints by
/// construction (random rows are independent with probability one; rank is
/// re-checked by the dense factorization).
pub fn random_test_problem(seed: u64, max_vars: usize, kind: TestProblemKind) -> QpProblem {
    let mut rng = SplitMix64::new(seed.wrapping_mul(0x5851f42d4c957f2d).wrapping_add(1));
    let n = 2 + rng.below(max_vars.saturating_sub(1).max(1));
    // Q = G Gᵀ + eps·I with G n×r
    let r = 1 + rng.below(n);
    let mut g = vec![0.0f64; n * r];
    for v in g.iter_mut() {
        *v = rng.range(-1.0, 1.0);
    }
    let eps = 1e-3 + rng.next_f64();
    let mut trips = Vec::new();
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..r {
                acc += g[k * n + i] * g[k * n + j];
            }
            if i == j {
                acc += eps;
            }
            if acc != 0.0 {
                trips.push((i, j, acc));
            }
        }
    }
    let quad = CscMatrix::from_triplets(n, n, &trips);
    let linear: Vec<f64> = (0..n).map(|_| rng.range(-2.0, 2.0)).collect();
    let mut problem = QpProblem::new(n, quad, linear);
    match kind {
        TestProblemKind::Equality => {
            let m = 1 + rng.below((n / 2).max(1));
            let mut atrips = Vec::new();
            for i in 0..m {
                for j in 0..n {
                    if rng.next_f64() < 0.6 {
                        atrips.push((i, j, rng.range(-1.0, 1.0)));
                    }
                }
                // keep each row nonempty
                atrips.push((i, rng.below(n), rng.range(0.5, 1.5)));
            }
            let a = CscMatrix::from_triplets(m, n, &atrips);
            let b: Vec<f64> = (0..m).map(|_| rng.range(-1.0, 1.0)).collect();
            problem.set_rows(a, b.clone(), b);
        }
        TestProblemKind::Box => {
            for j in 0..n {
                let lo = rng.range(-1.5, 0.0);
                let hi = rng.range(0.0, 1.5);
                problem.var_lower[j] = lo;
                problem.var_upper[j] = hi;
            }
        }
    }
    problem
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        let mut a = DenseMatrix::zeros(2, 2);
        a.set(0, 0, 2.0);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        a.set(1, 1, 3.0);
        let x = lu_solve(&a, &[5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn box_reference_matches_construction() {
        // construct a box QP with a known optimum and check the reference finds it
        let mut rng = SplitMix64::new(7);
        for _ in 0..20 {
            let n = 2 + rng.below(6);
            let mut trips = Vec::new();
            for i in 0..n {
                trips.push((i, i, 1.0 + rng.next_f64()));
            }
            let quad = CscMatrix::from_triplets(n, n, &trips);
            // choose optimum and bounds around it
            let xstar: Vec<f64> = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
            let mut problem = QpProblem::new(n, quad.clone(), vec![0.0; n]);
            for j in 0..n {
                let pin = rng.next_f64() < 0.5;
                if pin {
                    problem.var_lower[j] = xstar[j];
                    problem.var_upper[j] = xstar[j] + rng.range(0.1, 1.0);
                    // gradient must push toward lower bound: g = Qx* + c ≥ 0
                } else {
                    problem.var_lower[j] = xstar[j] - 1.0;
                    problem.var_upper[j] = xstar[j] + 1.0;
                }
            }
            // stationarity: c = -Q x* + slack on pinned coords
            let dq = dense_quadratic(&problem);
            for j in 0..n {
                let mut qx = 0.0;
                for c in 0..n {
                    qx += dq.get(j, c) * xstar[c];
                }
                let pinned = problem.var_lower[j] == xstar[j];
                problem.linear[j] = -qx + if pinned { rng.range(0.0, 0.5) } else { 0.0 };
            }
            let x = solve_box_qp_dense(&problem, 1e-9).expect("reference failed");
            for j in 0..n {
                assert!((x[j] - xstar[j]).abs() < 1e-8, "coord {j}: {} vs {}", x[j], xstar[j]);
            }
        }
    }
}
