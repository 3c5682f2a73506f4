//! Problem data, solver settings, solutions and errors.

use crate::csc::CscMatrix;

/// Convex quadratic program
///
/// ```text
///   minimize    1/2 zᵀQz + cᵀz
///   subject to  row_lower ≤ A z ≤ row_upper
///               var_lower ≤   z ≤ var_upper
/// ```
///
/// `Q` is given as its upper triangle and must be positive semidefinite.
/// Equality rows are expressed with `row_lower == row_upper`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub quadratic_upper: CscMatrix,
    pub linear: Vec<f64>,
    pub rows: CscMatrix,
    pub row_lower: Vec<f64>,
    pub row_upper: Vec<f64>,
    pub var_lower: Vec<f64>,
    pub var_upper: Vec<f64>,
}

impl QpProblem {
    /// An unconstrained problem skeleton with free variables.
    pub fn new(num_vars: usize, quadratic_upper: CscMatrix, linear: Vec<f64>) -> Self {
        assert_eq!(quadratic_upper.nrows(), num_vars);
        assert_eq!(quadratic_upper.ncols(), num_vars);
        assert_eq!(linear.len(), num_vars);
        QpProblem {
            quadratic_upper,
            linear,
            rows: CscMatrix::zero(0, num_vars),
            row_lower: Vec::new(),
            row_upper: Vec::new(),
            var_lower: vec![f64::NEG_INFINITY; num_vars],
            var_upper: vec![f64::INFINITY; num_vars],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn num_rows(&self) -> usize {
        self.row_lower.len()
    }

    pub fn set_rows(&mut self, rows: CscMatrix, lower: Vec<f64>, upper: Vec<f64>) {
        assert_eq!(rows.ncols(), self.num_vars());
        assert_eq!(rows.nrows(), lower.len());
        assert_eq!(lower.len(), upper.len());
        self.rows = rows;
        self.row_lower = lower;
        self.row_upper = upper;
    }

    /// Add `tau/2 · ‖z − center‖²` to the objective, yielding a strongly
    /// convex problem with a unique minimizer.
    pub fn with_proximal(&self, tau: f64, center: &[f64]) -> QpProblem {
        assert!(tau > 0.0);
        assert_eq!(center.len(), self.num_vars());
        let mut out = self.clone();
        out.add_diagonal(tau);
        for (c, &z0) in out.linear.iter_mut().zip(center) {
            *c -= tau * z0;
        }
        out
    }

    /// Q ← Q + d·I
    pub fn add_diagonal(&mut self, d: f64) {
        let n = self.num_vars();
        let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(self.quadratic_upper.nnz() + n);
        for c in 0..n {
            for (r, v) in self.quadratic_upper.col_iter(c) {
                trips.push((r, c, v));
            }
        }
        for i in 0..n {
            trips.push((i, i, d));
        }
        self.quadratic_upper = CscMatrix::from_triplets(n, n, &trips);
    }

    /// Objective value 1/2 zᵀQz + cᵀz.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let mut quad = 0.0;
        for c in 0..self.num_vars() {
            for (r, v) in self.quadratic_upper.col_iter(c) {
                if r == c {
                    quad += v * z[c] * z[c];
                } else {
                    quad += 2.0 * v * z[r] * z[c];
                }
            }
        }
        0.5 * quad + self.linear.iter().zip(z).map(|(c, x)| c * x).sum::<f64>()
    }
}

/// Termination state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    /// Primal point (best iterate on non-optimal exits).
    pub z: Vec<f64>,
    /// Multipliers for the general rows, one per row.
    pub row_duals: Vec<f64>,
    /// Multipliers for the variable bounds.
    pub bound_duals: Vec<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub complementarity_residual: f64,
    pub iterations: usize,
    pub polished: bool,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone)]
pub enum QpError {
    /// The constraints admit no feasible point.
    Infeasible,
    /// The problem is unbounded below (dual infeasible).
    Unbounded,
    /// Residual tolerances were not met within the iteration budget.
    IterationLimit { primal_residual: f64, dual_residual: f64 },
    /// Problem data is inconsistent (dimensions, non-PSD quadratic, ...).
    BadProblem(String),
}

impl std::fmt::Display for QpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QpError::Infeasible => write!(f, "problem is primal infeasible"),
            QpError::Unbounded => write!(f, "problem is unbounded (dual infeasible)"),
            QpError::IterationLimit { primal_residual, dual_residual } => write!(
                f,
                "iteration limit reached (primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e})"
            ),
            QpError::BadProblem(msg) => write!(f, "bad problem data: {msg}"),
        }
    }
}

impl std::error::Error for QpError {}

/// Solver settings. Defaults follow the library-wide convention of
/// absolute 1e-8 residual tolerances for small subproblems; large stacked
/// problems typically run at 1e-7.
#[derive(Debug, Clone)]
pub struct Settings {
    /// Absolute tolerance on primal/dual residuals (∞-norm).
    pub eps_abs: f64,
    /// Relative tolerance component (0 disables).
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Primal regularization added to the KKT (1,1) block.
    pub sigma: f64,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    /// Initial step-size parameter.
    pub rho: f64,
    /// Multiplier applied to rho on equality rows.
    pub rho_eq_scale: f64,
    pub adaptive_rho: bool,
    /// Iterations between residual checks / adaptive-rho updates.
    pub check_interval: usize,
    /// Ruiz equilibration sweeps (0 disables scaling).
    pub scaling_iters: usize,
    /// Threshold on normalized certificates for infeasibility detection.
    pub eps_infeasible: f64,
    /// Attempt an active-set polish once ADMM residuals fall below
    /// `polish_trigger`; the polished point must meet `eps_abs`.
    pub polish: bool,
    pub polish_trigger: f64,
    pub polish_reg: f64,
    pub polish_refine_steps: usize,
    /// Record (iteration, primal, dual) residuals at every check.
    pub record_history: bool,
    /// Iterative-refinement steps on each in-loop KKT solve.
    pub kkt_refine_steps: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            eps_abs: 1e-8,
            eps_rel: 0.0,
            max_iter: 200_000,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            rho_eq_scale: 1e3,
            adaptive_rho: false,
            check_interval: 25,
            scaling_iters: 10,
            eps_infeasible: 1e-9,
            polish: true,
            polish_trigger: 1e-5,
            polish_reg: 1e-6,
            polish_refine_steps: 4,
            record_history: false,
            kkt_refine_steps: 1,
        }
    }
}

impl Settings {
    /// Tolerance profile for large stacked problems.
    pub fn large_problem() -> Self {
        Settings { eps_abs: 1e-7, ..Settings::default() }
    }
}
