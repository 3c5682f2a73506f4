//! Operator-splitting solver with direct KKT solves.
//!
//! The algorithm is the standard ADMM splitting for QPs: each iteration
//! solves one quasi-definite KKT system (factorized once and reused),
//! projects onto the constraint box and updates the multipliers, with
//! over-relaxation. Variable bounds are folded in as extra rows. Residuals
//! are always evaluated on the original (unscaled) data. Once residuals are
//! small enough an active-set polish solves the reduced KKT system exactly;
//! the polished point is accepted only if it actually meets the tolerances.
//!
//! Everything is deterministic: fixed iteration order, no concurrency, no
//! time-based decisions.

use crate::csc::{inf_norm, CscMatrix};
use crate::ldl::{LdlError, LdlFactor};
use crate::problem::{QpError, QpProblem, QpSolution, QpStatus, Settings};

/// Prepared solver state for one problem.
///
/// The factorization and scaling are computed once. The linear cost may be
/// updated between solves (`update_linear_cost`), and each `solve` warm
/// starts from the current iterates, which makes repeated closely-related
/// solves cheap.
pub struct Workspace {
    settings: Settings,
    n: usize,
    m: usize,
    // original (unscaled) data; `a` has the bound rows folded in
    p_upper: CscMatrix,
    q: Vec<f64>,
    a: CscMatrix,
    lower: Vec<f64>,
    upper: Vec<f64>,
    num_gen_rows: usize,
    bound_vars: Vec<usize>,
    // scaled copies
    p_scaled: CscMatrix,
    q_scaled: Vec<f64>,
    a_scaled: CscMatrix,
    lower_scaled: Vec<f64>,
    upper_scaled: Vec<f64>,
    d_scale: Vec<f64>,
    e_scale: Vec<f64>,
    c_scale: f64,
    // KKT machinery
    kkt: CscMatrix,
    rho_positions: Vec<usize>,
    factor: LdlFactor,
    rho_base: Vec<f64>,
    rho_factor: f64,
    // iterates (scaled)
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    iterations_total: usize,
    /// (iteration, primal, dual) at each residual check, when enabled.
    pub history: Vec<(usize, f64, f64)>,
}

struct Unscaled {
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
}

struct ResidualInfo {
    prim: f64,
    dual: f64,
    prim_scale: f64,
    dual_scale: f64,
}

impl Workspace {
    pub fn new(problem: &QpProblem, settings: Settings) -> Result<Self, QpError> {
        let n = problem.num_vars();
        validate(problem)?;

        // fold finite variable bounds in as identity rows; bound rows go
        // FIRST so that, in the KKT elimination order, the general coupling
        // rows stay last and fill-in stays inside the natural block structure
        let mut bound_vars = Vec::new();
        for j in 0..n {
            if problem.var_lower[j].is_finite() || problem.var_upper[j].is_finite() {
                bound_vars.push(j);
            }
        }
        let num_gen_rows = problem.num_rows();
        let n_bnd = bound_vars.len();
        let m = num_gen_rows + n_bnd;
        let mut trips = Vec::with_capacity(problem.rows.nnz() + n_bnd);
        let mut lower = Vec::with_capacity(m);
        let mut upper = Vec::with_capacity(m);
        for (k, &j) in bound_vars.iter().enumerate() {
            trips.push((k, j, 1.0));
            lower.push(problem.var_lower[j]);
            upper.push(problem.var_upper[j]);
        }
        for c in 0..n {
            for (r, v) in problem.rows.col_iter(c) {
                trips.push((n_bnd + r, c, v));
            }
        }
        lower.extend_from_slice(&problem.row_lower);
        upper.extend_from_slice(&problem.row_upper);
        let a = CscMatrix::from_triplets(m, n, &trips);

        let mut ws = Workspace {
            settings,
            n,
            m,
            p_upper: problem.quadratic_upper.clone(),
            q: problem.linear.clone(),
            a,
            lower,
            upper,
            num_gen_rows,
            bound_vars,
            p_scaled: CscMatrix::zero(0, 0),
            q_scaled: Vec::new(),
            a_scaled: CscMatrix::zero(0, 0),
            lower_scaled: Vec::new(),
            upper_scaled: Vec::new(),
            d_scale: vec![1.0; n],
            e_scale: vec![1.0; m],
            c_scale: 1.0,
            kkt: CscMatrix::zero(0, 0),
            rho_positions: Vec::new(),
            factor: LdlFactor::symbolic(&CscMatrix::identity(1)).unwrap(),
            rho_base: Vec::new(),
            rho_factor: 1.0,
            x: vec![0.0; n],
            z: vec![0.0; m],
            y: vec![0.0; m],
            iterations_total: 0,
            history: Vec::new(),
        };
        ws.scale_data();
        ws.init_rho();
        ws.build_kkt()?;
        Ok(ws)
    }

    /// Replace the linear cost term; keeps factorization and warm state.
    pub fn update_linear_cost(&mut self, q: &[f64]) {
        assert_eq!(q.len(), self.n);
        self.q.copy_from_slice(q);
        for j in 0..self.n {
            self.q_scaled[j] = self.c_scale * self.d_scale[j] * q[j];
        }
    }

    /// Dump solver-internal state for selected variables (diagnostics).
    #[doc(hidden)]
    pub fn debug_var_state(&self, vars: &[usize]) {
        let u = self.unscaled();
        let mut ax = vec![0.0; self.m];
        self.a.mul_add(&u.x, &mut ax);
        for &j in vars {
            // find the bound row of variable j
            if let Some(k) = self.bound_vars.iter().position(|&v| v == j) {
                println!(
                    "var {j}: bound row {k}: x={:.12e} z={:.12e} ax={:.12e} y={:.12e} l={:.6} u={:.6} rho={:.3} e={:.3e} d={:.3e}",
                    u.x[j], u.z[k], ax[k], u.y[k], self.lower[k], self.upper[k], self.rho(k),
                    self.e_scale[k], self.d_scale[j]
                );
            }
        }
    }

    /// Run the polish step from the current iterates (diagnostics).
    #[doc(hidden)]
    pub fn debug_polish(&self) {
        let u = self.unscaled();
        match self.polish(&u, 1e-6) {
            Some(pol) => println!(
                "polish: rp={:.3e} rd={:.3e} comp={:.3e} obj={:.9}",
                pol.primal_residual, pol.dual_residual, pol.complementarity_residual, pol.objective
            ),
            None => println!("polish: failed (singular or setup)"),
        }
    }

    /// Trace one iteration's intermediates for a row (diagnostics).
    #[doc(hidden)]
    pub fn debug_trace_row(&mut self, k: usize) {
        let n = self.n;
        let m = self.m;
        let alpha = self.settings.alpha;
        let mut rhs = vec![0.0; n + m];
        let mut scratch = vec![0.0; n + m];
        for j in 0..n {
            rhs[j] = self.settings.sigma * self.x[j] - self.q_scaled[j];
        }
        for i in 0..m {
            rhs[n + i] = self.z[i] - self.y[i] / self.rho(i);
        }
        let b = rhs.clone();
        self.kkt_solve(&mut rhs, &mut scratch);
        // KKT residual on row n+k
        let mut kx = vec![0.0; n + m];
        sym_mul_add(&self.kkt, &rhs, &mut kx);
        println!("row {k}: kkt bottom-row residual = {:.6e}", kx[n + k] - b[n + k]);
        let ztilde_k = self.z[k] + (rhs[n + k] - self.y[k]) / self.rho(k);
        // scaled A x-tilde on row k
        let mut ax = vec![0.0; m];
        self.a_scaled.mul_add(&rhs[..n], &mut ax);
        println!(
            "row {k}: ztilde={:.12e} z={:.12e} y={:.12e} nu={:.12e} a_xtilde={:.12e}",
            ztilde_k, self.z[k], self.y[k], rhs[n + k], ax[k]
        );
        let v = alpha * ztilde_k + (1.0 - alpha) * self.z[k] + self.y[k] / self.rho(k);
        let zp = v.clamp(self.lower_scaled[k], self.upper_scaled[k]);
        println!(
            "row {k}: v={:.12e} zp={:.12e} y_next={:.12e} bounds=[{:.6e},{:.6e}]",
            v, zp, self.rho(k) * (v - zp), self.lower_scaled[k], self.upper_scaled[k]
        );
    }

    /// Size of the KKT factor (diagnostics).
    pub fn factor_nnz(&self) -> usize {
        self.factor.nnz()
    }

    /// Reset iterates to a cold start.
    pub fn reset(&mut self) {
        self.x.iter_mut().for_each(|v| *v = 0.0);
        self.z.iter_mut().for_each(|v| *v = 0.0);
        self.y.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Warm start the primal iterate (e.g. from a related solve).
    pub fn warm_start_primal(&mut self, z: &[f64]) {
        assert_eq!(z.len(), self.n);
        for j in 0..self.n {
            self.x[j] = z[j] / self.d_scale[j];
        }
        let mut ax = vec![0.0; self.m];
        self.a_scaled.mul_add(&self.x, &mut ax);
        for i in 0..self.m {
            self.z[i] = ax[i].clamp(self.lower_scaled[i], self.upper_scaled[i]);
        }
    }

    fn scale_data(&mut self) {
        self.p_scaled = self.p_upper.clone();
        self.a_scaled = self.a.clone();
        self.q_scaled = self.q.clone();
        self.lower_scaled = self.lower.clone();
        self.upper_scaled = self.upper.clone();
        self.d_scale.iter_mut().for_each(|v| *v = 1.0);
        self.e_scale.iter_mut().for_each(|v| *v = 1.0);
        self.c_scale = 1.0;
        if self.settings.scaling_iters == 0 {
            return;
        }
        let n = self.n;
        let m = self.m;
        let mut col_p = vec![0.0; n];
        let mut col_a = vec![0.0; n];
        let mut row_a = vec![0.0; m];
        for _ in 0..self.settings.scaling_iters {
            // column norms of [P; A], row norms of A (symmetrized KKT view)
            sym_col_norms(&self.p_scaled, &mut col_p);
            self.a_scaled.col_norms_inf(&mut col_a);
            row_a.iter_mut().for_each(|v| *v = 0.0);
            self.a_scaled.row_norms_inf(&mut row_a);
            let mut dd = vec![1.0; n];
            for j in 0..n {
                let norm = col_p[j].max(col_a[j]);
                dd[j] = limit_scale(norm);
            }
            let mut de = vec![1.0; m];
            for i in 0..m {
                de[i] = limit_scale(row_a[i]);
            }
            self.p_scaled.scale(&dd, &dd);
            self.a_scaled.scale(&de, &dd);
            for j in 0..n {
                self.q_scaled[j] *= dd[j];
                self.d_scale[j] *= dd[j];
            }
            for i in 0..m {
                self.lower_scaled[i] *= de[i];
                self.upper_scaled[i] *= de[i];
                self.e_scale[i] *= de[i];
            }
            // cost normalization
            sym_col_norms(&self.p_scaled, &mut col_p);
            let mean_p = if n > 0 { col_p.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let gamma = limit_scale(mean_p.max(inf_norm(&self.q_scaled)));
            for v in self.p_scaled.values_mut() {
                *v *= gamma;
            }
            for v in self.q_scaled.iter_mut() {
                *v *= gamma;
            }
            self.c_scale *= gamma;
        }
    }

    fn init_rho(&mut self) {
        let rho = self.settings.rho;
        self.rho_base = (0..self.m)
            .map(|i| {
                if self.lower[i] == self.upper[i] {
                    rho * self.settings.rho_eq_scale
                } else {
                    rho
                }
            })
            .collect();
        self.rho_factor = 1.0;
    }

    fn rho(&self, i: usize) -> f64 {
        self.rho_base[i] * self.rho_factor
    }

    fn build_kkt(&mut self) -> Result<(), QpError> {
        let n = self.n;
        let m = self.m;
        let mut trips: Vec<(usize, usize, f64)> =
            Vec::with_capacity(self.p_scaled.nnz() + n + self.a_scaled.nnz() + m);
        let mut have_diag = vec![false; n];
        for c in 0..n {
            for (r, v) in self.p_scaled.col_iter(c) {
                let v = if r == c {
                    have_diag[c] = true;
                    v + self.settings.sigma
                } else {
                    v
                };
                trips.push((r, c, v));
            }
        }
        for c in 0..n {
            if !have_diag[c] {
                trips.push((c, c, self.settings.sigma));
            }
        }
        // Aᵀ block: column n+i holds row i of A
        let at = self.a_scaled.transpose();
        for i in 0..m {
            for (j, v) in at.col_iter(i) {
                trips.push((j, n + i, v));
            }
            trips.push((n + i, n + i, -1.0 / self.rho(i)));
        }
        self.kkt = CscMatrix::from_triplets(n + m, n + m, &trips);
        // record positions of the -1/rho diagonal entries (last entry of each column n+i)
        self.rho_positions = (0..m).map(|i| self.kkt.col_ptr()[n + i + 1] - 1).collect();
        self.factor = LdlFactor::symbolic(&self.kkt).map_err(|_| QpError::BadProblem("kkt".into()))?;
        self.factor_kkt()
    }

    fn factor_kkt(&mut self) -> Result<(), QpError> {
        match self.factor.factor(&self.kkt) {
            Ok(()) => {}
            Err(LdlError::ZeroPivot(k)) if k < self.n => {
                return Err(QpError::BadProblem("quadratic term is not positive semidefinite".into()))
            }
            Err(e) => return Err(QpError::BadProblem(format!("kkt factorization failed: {e:?}"))),
        }
        // quasi-definiteness check: the leading n pivots factor P+sigma·I and
        // must be positive when Q is PSD
        if self.factor.d()[..self.n].iter().any(|&d| d <= 0.0) {
            return Err(QpError::BadProblem("quadratic term is not positive semidefinite".into()));
        }
        Ok(())
    }

    fn update_rho(&mut self, factor: f64) -> Result<(), QpError> {
        self.rho_factor *= factor;
        for i in 0..self.m {
            let pos = self.rho_positions[i];
            self.kkt.values_mut()[pos] = -1.0 / self.rho(i);
        }
        self.factor_kkt()
    }

    fn unscaled(&self) -> Unscaled {
        let mut x = vec![0.0; self.n];
        for j in 0..self.n {
            x[j] = self.d_scale[j] * self.x[j];
        }
        let mut z = vec![0.0; self.m];
        let mut y = vec![0.0; self.m];
        for i in 0..self.m {
            z[i] = self.z[i] / self.e_scale[i];
            y[i] = self.e_scale[i] * self.y[i] / self.c_scale;
        }
        Unscaled { x, z, y }
    }

    fn residuals(&self, u: &Unscaled) -> ResidualInfo {
        let mut ax = vec![0.0; self.m];
        self.a.mul_add(&u.x, &mut ax);
        let mut prim = 0.0f64;
        for i in 0..self.m {
            prim = prim.max((ax[i] - u.z[i]).abs());
        }
        let mut px = vec![0.0; self.n];
        sym_mul_add(&self.p_upper, &u.x, &mut px);
        let mut aty = vec![0.0; self.n];
        self.a.mul_transpose_add(&u.y, &mut aty);
        let mut dual = 0.0f64;
        for j in 0..self.n {
            dual = dual.max((px[j] + self.q[j] + aty[j]).abs());
        }
        ResidualInfo {
            prim,
            dual,
            prim_scale: inf_norm(&ax).max(inf_norm(&u.z)),
            dual_scale: inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.q)),
        }
    }

    fn tolerances_met(&self, r: &ResidualInfo) -> bool {
        let eps_p = self.settings.eps_abs + self.settings.eps_rel * r.prim_scale;
        let eps_d = self.settings.eps_abs + self.settings.eps_rel * r.dual_scale;
        r.prim <= eps_p && r.dual <= eps_d
    }

    /// Solve the KKT system with optional iterative refinement.
    fn kkt_solve(&self, rhs: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        let dim = self.n + self.m;
        debug_assert_eq!(rhs.len(), dim);
        if self.settings.kkt_refine_steps == 0 {
            self.factor.solve_in_place(rhs);
            return;
        }
        scratch.clear();
        scratch.extend_from_slice(rhs);
        self.factor.solve_in_place(rhs);
        for _ in 0..self.settings.kkt_refine_steps {
            // residual = b - K·x, reusing scratch[0..dim] as b and appending r
            let mut resid = vec![0.0; dim];
            sym_mul_add(&self.kkt, rhs, &mut resid);
            for i in 0..dim {
                resid[i] = scratch[i] - resid[i];
            }
            self.factor.solve_in_place(&mut resid);
            for i in 0..dim {
                rhs[i] += resid[i];
            }
        }
    }

    /// Run the solver from the current iterates.
    pub fn solve(&mut self) -> QpSolution {
        let n = self.n;
        let m = self.m;
        let alpha = self.settings.alpha;
        let mut rhs = vec![0.0; n + m];
        let mut scratch = vec![0.0; n + m];
        let mut ztilde = vec![0.0; m];
        let mut prev_check = self.unscaled();
        let mut polish_trigger = self.settings.polish_trigger.max(self.settings.eps_abs);
        let mut polish_cooldown = 0usize;

        let mut iter = 0usize;
        while iter < self.settings.max_iter {
            iter += 1;
            self.iterations_total += 1;
            // x̃, ν from the KKT solve
            for j in 0..n {
                rhs[j] = self.settings.sigma * self.x[j] - self.q_scaled[j];
            }
            for i in 0..m {
                rhs[n + i] = self.z[i] - self.y[i] / self.rho(i);
            }
            self.kkt_solve(&mut rhs, &mut scratch);
            for i in 0..m {
                ztilde[i] = self.z[i] + (rhs[n + i] - self.y[i]) / self.rho(i);
            }
            for j in 0..n {
                self.x[j] = alpha * rhs[j] + (1.0 - alpha) * self.x[j];
            }
            for i in 0..m {
                let v = alpha * ztilde[i] + (1.0 - alpha) * self.z[i] + self.y[i] / self.rho(i);
                let zp = v.clamp(self.lower_scaled[i], self.upper_scaled[i]);
                self.y[i] = self.rho(i) * (v - zp);
                self.z[i] = zp;
            }

            if iter % self.settings.check_interval != 0 && iter != self.settings.max_iter {
                continue;
            }
            let u = self.unscaled();
            let res = self.residuals(&u);
            if self.settings.record_history {
                self.history.push((self.iterations_total, res.prim, res.dual));
            }
            if self.tolerances_met(&res) {
                let sol = self.assemble_solution(&u, &res, QpStatus::Optimal, false);
                return self.try_polish(sol);
            }
            // polish early once the iterates are good enough; accept only a
            // polished point that meets the final tolerance
            if self.settings.polish
                && polish_cooldown == 0
                && res.prim <= polish_trigger
                && res.dual <= polish_trigger
            {
                match self.polish(&u, res.prim) {
                    Some(pol) => {
                        let rr = ResidualInfo {
                            prim: pol.primal_residual,
                            dual: pol.dual_residual,
                            prim_scale: res.prim_scale,
                            dual_scale: res.dual_scale,
                        };
                        if self.tolerances_met(&rr) {
                            return pol;
                        }
                        // inaccurate polish: wait for better iterates
                        polish_trigger = (polish_trigger * 0.1).max(self.settings.eps_abs);
                    }
                    None => polish_cooldown = 8,
                }
            } else if polish_cooldown > 0 {
                polish_cooldown -= 1;
            }
            // infeasibility certificates from the inter-check deltas
            if let Some(status) = self.detect_infeasible(&prev_check, &u) {
                let sol = self.assemble_solution(&u, &res, status, false);
                return sol;
            }
            // adaptive step size, with a cumulative clamp
            if self.settings.adaptive_rho {
                let rp = res.prim / res.prim_scale.max(1e-30);
                let rd = res.dual / res.dual_scale.max(1e-30);
                let ratio = ((rp.max(1e-30)) / (rd.max(1e-30))).sqrt();
                if ratio > 5.0 || ratio < 0.2 {
                    let target = (self.rho_factor * ratio).clamp(1e-4, 1e4);
                    let step = target / self.rho_factor;
                    if (step - 1.0).abs() > 1e-9 && self.update_rho(step).is_err() {
                        // keep going with the old factorization
                        self.rho_factor /= step;
                    }
                }
            }
            prev_check = u;
        }
        let u = self.unscaled();
        let res = self.residuals(&u);
        self.assemble_solution(&u, &res, QpStatus::IterationLimit, false)
    }

    fn assemble_solution(
        &self,
        u: &Unscaled,
        res: &ResidualInfo,
        status: QpStatus,
        polished: bool,
    ) -> QpSolution {
        let n_bnd = self.bound_vars.len();
        let mut row_duals = vec![0.0; self.num_gen_rows];
        row_duals.copy_from_slice(&u.y[n_bnd..]);
        let mut bound_duals = vec![0.0; self.n];
        for (k, &j) in self.bound_vars.iter().enumerate() {
            bound_duals[j] = u.y[k];
        }
        let objective = {
            let mut px = vec![0.0; self.n];
            sym_mul_add(&self.p_upper, &u.x, &mut px);
            0.5 * px.iter().zip(&u.x).map(|(a, b)| a * b).sum::<f64>()
                + self.q.iter().zip(&u.x).map(|(a, b)| a * b).sum::<f64>()
        };
        QpSolution {
            status,
            z: u.x.clone(),
            row_duals,
            bound_duals,
            objective,
            primal_residual: res.prim,
            dual_residual: res.dual,
            complementarity_residual: self.complementarity(u),
            iterations: self.iterations_total,
            polished,
        }
    }

    fn complementarity(&self, u: &Unscaled) -> f64 {
        let mut ax = vec![0.0; self.m];
        self.a.mul_add(&u.x, &mut ax);
        let mut worst = 0.0f64;
        for i in 0..self.m {
            let yi = u.y[i];
            if yi == 0.0 {
                continue;
            }
            let gap = if yi > 0.0 {
                if self.upper[i].is_finite() {
                    (self.upper[i] - ax[i]).abs()
                } else {
                    1.0
                }
            } else if self.lower[i].is_finite() {
                (self.lower[i] - ax[i]).abs()
            } else {
                1.0
            };
            worst = worst.max(yi.abs() * gap);
        }
        worst
    }

    fn detect_infeasible(&self, prev: &Unscaled, cur: &Unscaled) -> Option<QpStatus> {
        let eps = self.settings.eps_infeasible;
        // primal infeasibility: a diverging dual direction
        let dy: Vec<f64> = cur.y.iter().zip(&prev.y).map(|(a, b)| a - b).collect();
        let ny = inf_norm(&dy);
        if ny > eps {
            let mut aty = vec![0.0; self.n];
            self.a.mul_transpose_add(&dy, &mut aty);
            if inf_norm(&aty) <= eps * ny {
                let mut support = 0.0;
                let mut valid = true;
                for i in 0..self.m {
                    let d = dy[i];
                    if d > eps * ny {
                        if self.upper[i].is_finite() {
                            support += self.upper[i] * d;
                        } else {
                            valid = false;
                            break;
                        }
                    } else if d < -eps * ny {
                        if self.lower[i].is_finite() {
                            support += self.lower[i] * d;
                        } else {
                            valid = false;
                            break;
                        }
                    }
                }
                if valid && support <= -eps * ny {
                    return Some(QpStatus::PrimalInfeasible);
                }
            }
        }
        // dual infeasibility: a descent ray
        let dx: Vec<f64> = cur.x.iter().zip(&prev.x).map(|(a, b)| a - b).collect();
        let nx = inf_norm(&dx);
        if nx > eps {
            let mut pdx = vec![0.0; self.n];
            sym_mul_add(&self.p_upper, &dx, &mut pdx);
            let qdx: f64 = self.q.iter().zip(&dx).map(|(a, b)| a * b).sum();
            if inf_norm(&pdx) <= eps * nx && qdx <= -eps * nx {
                let mut adx = vec![0.0; self.m];
                self.a.mul_add(&dx, &mut adx);
                let ok = (0..self.m).all(|i| {
                    let v = adx[i];
                    let lf = self.lower[i].is_finite();
                    let uf = self.upper[i].is_finite();
                    match (lf, uf) {
                        (true, true) => v.abs() <= eps * nx,
                        (true, false) => v >= -eps * nx,
                        (false, true) => v <= eps * nx,
                        (false, false) => true,
                    }
                });
                if ok {
                    return Some(QpStatus::DualInfeasible);
                }
            }
        }
        None
    }

    /// Active-set polish: solve the equality-constrained KKT system defined
    /// by the multiplier signs, with static regularization and iterative
    /// refinement against the unregularized system.
    /// Active-set polish: pin every row that is near a bound (tolerance
    /// adapted to the current primal residual), solve the resulting
    /// equality-constrained problem with a small proximal term centered at
    /// the current iterate (so free directions of degenerate faces do not
    /// drift), and refine against the unregularized dual block. The caller
    /// accepts the result only if its residuals actually improve.
    fn polish(&self, u: &Unscaled, rp_hint: f64) -> Option<QpSolution> {
        let n = self.n;
        let mut ax = vec![0.0; self.m];
        self.a.mul_add(&u.x, &mut ax);
        let near_tol = (10.0 * rp_hint).max(1e-8);
        let slack = |a: f64, b: f64| (a - b).abs();
        let mut act_rows: Vec<(usize, f64)> = Vec::new();
        for i in 0..self.m {
            if self.lower[i] == self.upper[i] {
                act_rows.push((i, self.lower[i]));
                continue;
            }
            let atol_lo = near_tol * (1.0 + self.lower[i].abs());
            let atol_up = near_tol * (1.0 + self.upper[i].abs());
            let near_lo = self.lower[i].is_finite()
                && slack(u.z[i], self.lower[i]).min(slack(ax[i], self.lower[i])) <= atol_lo;
            let near_up = self.upper[i].is_finite()
                && slack(u.z[i], self.upper[i]).min(slack(ax[i], self.upper[i])) <= atol_up;
            match (near_lo, near_up) {
                (true, false) => act_rows.push((i, self.lower[i])),
                (false, true) => act_rows.push((i, self.upper[i])),
                (true, true) => {
                    if u.y[i] >= 0.0 {
                        act_rows.push((i, self.upper[i]));
                    } else {
                        act_rows.push((i, self.lower[i]));
                    }
                }
                (false, false) => {}
            }
        }
        let k = act_rows.len();
        let reg = self.settings.polish_reg;
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        let mut have_diag = vec![false; n];
        for c in 0..n {
            for (r, v) in self.p_upper.col_iter(c) {
                let v = if r == c {
                    have_diag[c] = true;
                    v + reg
                } else {
                    v
                };
                trips.push((r, c, v));
            }
        }
        for c in 0..n {
            if !have_diag[c] {
                trips.push((c, c, reg));
            }
        }
        let at = self.a.transpose();
        for (t, &(i, _)) in act_rows.iter().enumerate() {
            for (j, v) in at.col_iter(i) {
                trips.push((j, n + t, v));
            }
            trips.push((n + t, n + t, -reg));
        }
        let mut kkt = CscMatrix::from_triplets(n + k, n + k, &trips);
        let mut factor = LdlFactor::symbolic(&kkt).ok()?;
        // retry with heavier static regularization if the degenerate active
        // set produces an exact zero pivot
        let mut extra = 0.0;
        while factor.factor(&kkt).is_err() {
            extra = if extra == 0.0 { 100.0 * reg } else { extra * 100.0 };
            if extra > 1.0 {
                return None;
            }
            let bump = extra;
            let mut trips2 = trips.clone();
            for i in 0..n {
                trips2.push((i, i, bump));
            }
            for t in 0..k {
                trips2.push((n + t, n + t, -bump));
            }
            kkt = CscMatrix::from_triplets(n + k, n + k, &trips2);
        }

        // proximal center at the current iterate
        let mut rhs = vec![0.0; n + k];
        for j in 0..n {
            rhs[j] = -self.q[j] + reg * u.x[j];
        }
        for (t, &(_, b)) in act_rows.iter().enumerate() {
            rhs[n + t] = b;
        }
        let mut sol = rhs.clone();
        factor.solve_in_place(&mut sol);
        // refinement against the system without the dual-block perturbation
        for _ in 0..self.settings.polish_refine_steps {
            let mut resid = rhs.clone();
            let mut px = vec![0.0; n];
            sym_mul_add(&self.p_upper, &sol[..n], &mut px);
            for j in 0..n {
                resid[j] -= px[j] + reg * sol[j];
            }
            for (t, &(i, _)) in act_rows.iter().enumerate() {
                let nu = sol[n + t];
                if nu != 0.0 {
                    for (j, v) in at.col_iter(i) {
                        resid[j] -= v * nu;
                    }
                }
            }
            for (t, &(i, _)) in act_rows.iter().enumerate() {
                let mut axr = 0.0;
                for (j, v) in at.col_iter(i) {
                    axr += v * sol[j];
                }
                resid[n + t] -= axr;
            }
            factor.solve_in_place(&mut resid);
            for (s, r) in sol.iter_mut().zip(&resid) {
                *s += r;
            }
        }

        let mut y_full = vec![0.0; self.m];
        for (t, &(i, _)) in act_rows.iter().enumerate() {
            y_full[i] = sol[n + t];
        }
        let pol = Unscaled { x: sol[..n].to_vec(), z: self.project_rows(&sol[..n]), y: y_full };
        let res = self.residuals(&pol);
        Some(self.assemble_solution(&pol, &res, QpStatus::Optimal, true))
    }

    fn project_rows(&self, x: &[f64]) -> Vec<f64> {
        let mut ax = vec![0.0; self.m];
        self.a.mul_add(x, &mut ax);
        for i in 0..self.m {
            ax[i] = ax[i].clamp(self.lower[i], self.upper[i]);
        }
        ax
    }

    fn try_polish(&self, unpolished: QpSolution) -> QpSolution {
        if !self.settings.polish {
            return unpolished;
        }
        let n_bnd = self.bound_vars.len();
        let u = Unscaled {
            x: unpolished.z.clone(),
            z: self.project_rows(&unpolished.z),
            y: {
                let mut y = vec![0.0; self.m];
                y[n_bnd..].copy_from_slice(&unpolished.row_duals);
                for (k, &j) in self.bound_vars.iter().enumerate() {
                    y[k] = unpolished.bound_duals[j];
                }
                y
            },
        };
        if let Some(pol) = self.polish(&u, unpolished.primal_residual) {
            if pol.primal_residual.max(pol.dual_residual)
                <= unpolished.primal_residual.max(unpolished.dual_residual)
            {
                return pol;
            }
        }
        unpolished
    }
}

fn validate(problem: &QpProblem) -> Result<(), QpError> {
    let n = problem.num_vars();
    if problem.quadratic_upper.nrows() != n || problem.quadratic_upper.ncols() != n {
        return Err(QpError::BadProblem("quadratic dimension mismatch".into()));
    }
    for c in 0..n {
        for (r, _) in problem.quadratic_upper.col_iter(c) {
            if r > c {
                return Err(QpError::BadProblem("quadratic must be upper triangular".into()));
            }
        }
    }
    if problem.rows.ncols() != n
        || problem.rows.nrows() != problem.row_lower.len()
        || problem.row_lower.len() != problem.row_upper.len()
    {
        return Err(QpError::BadProblem("row dimension mismatch".into()));
    }
    if problem.var_lower.len() != n || problem.var_upper.len() != n {
        return Err(QpError::BadProblem("bound dimension mismatch".into()));
    }
    for i in 0..problem.row_lower.len() {
        if problem.row_lower[i] > problem.row_upper[i] {
            return Err(QpError::BadProblem(format!("row {i} has lower > upper")));
        }
    }
    for j in 0..n {
        if problem.var_lower[j] > problem.var_upper[j] {
            return Err(QpError::BadProblem(format!("variable {j} has lower > upper")));
        }
    }
    Ok(())
}

fn limit_scale(norm: f64) -> f64 {
    if norm < 1e-12 {
        1.0
    } else {
        (1.0 / norm.sqrt()).clamp(1e-6, 1e6)
    }
}

/// y += S x where S is symmetric and stored as its upper triangle.
pub(crate) fn sym_mul_add(upper: &CscMatrix, x: &[f64], y: &mut [f64]) {
    for c in 0..upper.ncols() {
        let xc = x[c];
        let mut acc = 0.0;
        for (r, v) in upper.col_iter(c) {
            if r == c {
                acc += v * xc;
            } else {
                y[r] += v * xc;
                acc += v * x[r];
            }
        }
        y[c] += acc;
    }
}

/// Column norms of the symmetric matrix stored as an upper triangle.
fn sym_col_norms(upper: &CscMatrix, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..upper.ncols() {
        for (r, v) in upper.col_iter(c) {
            let a = v.abs();
            out[c] = out[c].max(a);
            if r != c {
                out[r] = out[r].max(a);
            }
        }
    }
}

/// KKT residuals of a candidate primal/dual point for `problem`:
/// (primal, dual, complementarity), all in the infinity norm.
pub fn kkt_residuals(
    problem: &QpProblem,
    z: &[f64],
    row_duals: &[f64],
    bound_duals: &[f64],
) -> (f64, f64, f64) {
    let n = problem.num_vars();
    let m = problem.num_rows();
    let mut az = vec![0.0; m];
    problem.rows.mul_add(z, &mut az);
    let mut prim = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..m {
        prim = prim.max(problem.row_lower[i] - az[i]).max(az[i] - problem.row_upper[i]);
        let yi = row_duals[i];
        if yi > 0.0 && problem.row_upper[i].is_finite() {
            comp = comp.max(yi * (problem.row_upper[i] - az[i]).abs());
        } else if yi < 0.0 && problem.row_lower[i].is_finite() {
            comp = comp.max(-yi * (problem.row_lower[i] - az[i]).abs());
        } else if yi != 0.0 {
            comp = comp.max(yi.abs());
        }
    }
    for j in 0..n {
        prim = prim.max(problem.var_lower[j] - z[j]).max(z[j] - problem.var_upper[j]);
        let yj = bound_duals[j];
        if yj > 0.0 && problem.var_upper[j].is_finite() {
            comp = comp.max(yj * (problem.var_upper[j] - z[j]).abs());
        } else if yj < 0.0 && problem.var_lower[j].is_finite() {
            comp = comp.max(-yj * (problem.var_lower[j] - z[j]).abs());
        } else if yj != 0.0 {
            comp = comp.max(yj.abs());
        }
    }
    let mut grad = problem.linear.clone();
    sym_mul_add(&problem.quadratic_upper, z, &mut grad);
    problem.rows.mul_transpose_add(row_duals, &mut grad);
    for j in 0..n {
        grad[j] += bound_duals[j];
    }
    (prim.max(0.0), inf_norm(&grad), comp)
}

/// Solve a (possibly degenerate) QP by proximal-point outer iterations:
/// each inner problem adds `kappa/2·‖z − center‖²`, making it strongly
/// convex, and the center is moved to the inner solution until it stops
/// moving. A fixed point is an exact minimizer of the original problem; the
/// returned residuals are measured against the original KKT system.
///
/// This is the reliable route for problems with large optimal faces (pure
/// LP structure), where the plain splitting iteration has a slow tail.
pub fn solve_qp_prox_point(
    problem: &QpProblem,
    settings: &Settings,
    kappa: f64,
    max_outer: usize,
) -> Result<QpSolution, QpError> {
    assert!(kappa > 0.0);
    let n = problem.num_vars();
    let prox = problem.with_proximal(kappa, &vec![0.0; n]);
    let mut inner_settings = settings.clone();
    inner_settings.eps_abs = (0.1 * settings.eps_abs).max(1e-10);
    let mut ws = Workspace::new(&prox, inner_settings)?;
    let mut center = vec![0.0; n];
    let move_tol = 0.25 * settings.eps_abs / kappa;
    let mut last: Option<QpSolution> = None;
    for _ in 0..max_outer {
        let mut cost = problem.linear.clone();
        for (c, z0) in cost.iter_mut().zip(&center) {
            *c -= kappa * z0;
        }
        ws.update_linear_cost(&cost);
        let sol = ws.solve();
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::PrimalInfeasible => return Err(QpError::Infeasible),
            // the proximal problem is never unbounded; treat anything else
            // as an iteration budget problem
            _ => {
                return Err(QpError::IterationLimit {
                    primal_residual: sol.primal_residual,
                    dual_residual: sol.dual_residual,
                })
            }
        }
        let moved = sol
            .z
            .iter()
            .zip(&center)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        center.copy_from_slice(&sol.z);
        let done = moved <= move_tol;
        last = Some(sol);
        if done {
            break;
        }
    }
    let mut sol = last.expect("at least one outer iteration");
    let (rp, rd, comp) = kkt_residuals(problem, &sol.z, &sol.row_duals, &sol.bound_duals);
    sol.primal_residual = rp;
    sol.dual_residual = rd;
    sol.complementarity_residual = comp;
    sol.objective = problem.objective(&sol.z);
    if rp <= settings.eps_abs && rd <= settings.eps_abs {
        sol.status = QpStatus::Optimal;
        Ok(sol)
    } else {
        Err(QpError::IterationLimit { primal_residual: rp, dual_residual: rd })
    }
}

/// Solve a QP from a cold start.
pub fn solve_qp(problem: &QpProblem, settings: &Settings) -> Result<QpSolution, QpError> {
    let mut ws = Workspace::new(problem, settings.clone())?;
    let sol = ws.solve();
    match sol.status {
        QpStatus::Optimal => Ok(sol),
        QpStatus::PrimalInfeasible => Err(QpError::Infeasible),
        QpStatus::DualInfeasible => Err(QpError::Unbounded),
        QpStatus::IterationLimit => Err(QpError::IterationLimit {
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
        }),
    }
}

/// Solve `problem + tau/2·‖z − center‖²`, which has a unique minimizer.
/// Defaults to a tighter tolerance than plain `solve_qp`.
pub fn solve_strongly_convex(
    problem: &QpProblem,
    tau: f64,
    center: &[f64],
    settings: &Settings,
) -> Result<QpSolution, QpError> {
    let prox = problem.with_proximal(tau, center);
    let mut s = settings.clone();
    s.eps_abs = s.eps_abs.min(1e-8);
    solve_qp(&prox, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> Settings {
        Settings::default()
    }

    #[test]
    fn active_bound_minimum() {
        // minimize x² s.t. x ≥ 1  →  x = 1, objective 1
        let q = CscMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]);
        let mut p = QpProblem::new(1, q, vec![0.0]);
        p.var_lower[0] = 1.0;
        let sol = solve_qp(&p, &settings()).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-8);
        assert!((sol.objective - 1.0).abs() < 1e-8);
    }

    #[test]
    fn unconstrained_identity() {
        // minimize ‖z − c‖²  →  z = c
        let c = [1.5, -2.0, 0.25];
        let q = CscMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (1, 1, 2.0), (2, 2, 2.0)]);
        let lin: Vec<f64> = c.iter().map(|v| -2.0 * v).collect();
        let p = QpProblem::new(3, q, lin);
        let sol = solve_qp(&p, &settings()).unwrap();
        for (zi, ci) in sol.z.iter().zip(c.iter()) {
            assert!((zi - ci).abs() < 1e-7, "{zi} vs {ci}");
        }
    }

    #[test]
    fn equality_constrained_hand_kkt() {
        // minimize x² + y² s.t. x + y = 1 → (0.5, 0.5), dual from KKT: 2x = -mu → mu = -1
        let q = CscMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 2.0)]);
        let mut p = QpProblem::new(2, q, vec![0.0, 0.0]);
        let a = CscMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]);
        p.set_rows(a, vec![1.0], vec![1.0]);
        let sol = solve_qp(&p, &settings()).unwrap();
        assert!((sol.z[0] - 0.5).abs() < 1e-9);
        assert!((sol.z[1] - 0.5).abs() < 1e-9);
        assert!((sol.row_duals[0] + 1.0).abs() < 1e-8, "dual {}", sol.row_duals[0]);
        assert!((sol.objective - 0.5).abs() < 1e-9);
    }

    #[test]
    fn proximal_identity() {
        // tau=1, Q=0, c=0, center=v, box-free → z=v
        let q = CscMatrix::zero(3, 3);
        let p = QpProblem::new(3, q, vec![0.0; 3]);
        let v = [0.5, -1.25, 3.0];
        let sol = solve_strongly_convex(&p, 1.0, &v, &settings()).unwrap();
        for (zi, vi) in sol.z.iter().zip(v.iter()) {
            assert!((zi - vi).abs() < 1e-8);
        }
    }

    #[test]
    fn proximal_projection() {
        // tau=2, minimize tau/2 (x−1)² s.t. x ≤ 0 → x = 0
        let q = CscMatrix::zero(1, 1);
        let mut p = QpProblem::new(1, q, vec![0.0]);
        p.var_upper[0] = 0.0;
        let sol = solve_strongly_convex(&p, 2.0, &[1.0], &settings()).unwrap();
        assert!(sol.z[0].abs() < 1e-8);
    }

    #[test]
    fn deterministic_repeat() {
        let q = CscMatrix::from_triplets(2, 2, &[(0, 0, 4.0), (0, 1, 1.0), (1, 1, 3.0)]);
        let mut p = QpProblem::new(2, q, vec![-1.0, 2.0]);
        p.var_lower = vec![-1.0, -1.0];
        p.var_upper = vec![1.0, 1.0];
        let s1 = solve_qp(&p, &settings()).unwrap();
        let s2 = solve_qp(&p, &settings()).unwrap();
        assert_eq!(s1.z, s2.z);
    }

    #[test]
    fn detects_primal_infeasible() {
        // x ≥ 1 and x ≤ 0 via two rows
        let q = CscMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]);
        let mut p = QpProblem::new(1, q, vec![0.0]);
        let a = CscMatrix::from_triplets(2, 1, &[(0, 0, 1.0), (1, 0, 1.0)]);
        p.set_rows(a, vec![1.0, f64::NEG_INFINITY], vec![f64::INFINITY, 0.0]);
        match solve_qp(&p, &settings()) {
            Err(QpError::Infeasible) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn detects_unbounded() {
        // minimize x with x ≤ 0 only: unbounded below
        let q = CscMatrix::zero(1, 1);
        let mut p = QpProblem::new(1, q, vec![1.0]);
        p.var_upper[0] = 0.0;
        match solve_qp(&p, &settings()) {
            Err(QpError::Unbounded) => {}
            other => panic!("expected unbounded, got {other:?}"),
        }
    }

    #[test]
    fn rejects_indefinite_quadratic() {
        let q = CscMatrix::from_triplets(1, 1, &[(0, 0, -1.0)]);
        let p = QpProblem::new(1, q, vec![0.0]);
        match solve_qp(&p, &settings()) {
            Err(QpError::BadProblem(_)) => {}
            other => panic!("expected bad problem, got {other:?}"),
        }
    }

    #[test]
    fn lp_with_rows() {
        // minimize -x - y  s.t. x + y ≤ 1, x, y ∈ [0, 1] → objective -1
        let q = CscMatrix::zero(2, 2);
        let mut p = QpProblem::new(2, q, vec![-1.0, -1.0]);
        let a = CscMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]);
        p.set_rows(a, vec![f64::NEG_INFINITY], vec![1.0]);
        p.var_lower = vec![0.0, 0.0];
        p.var_upper = vec![1.0, 1.0];
        let sol = solve_qp(&p, &settings()).unwrap();
        assert!((sol.objective + 1.0).abs() < 1e-7, "objective {}", sol.objective);
        assert!((sol.z[0] + sol.z[1] - 1.0).abs() < 1e-7);
    }
}
