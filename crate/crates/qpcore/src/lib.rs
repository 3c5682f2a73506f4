//! Sparse convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!   minimize    1/2 zᵀQz + cᵀz
//!   subject to  row_lower ≤ A z ≤ row_upper
//!               var_lower ≤   z ≤ var_upper
//! ```
//!
//! with `Q` positive semidefinite, via a first-order operator-splitting
//! scheme with over-relaxation, direct sparse KKT solves, infeasibility
//! detection and an active-set polish. Multipliers for rows and bounds are
//! returned alongside the primal point. Solves are fully deterministic for
//! fixed inputs and settings.
//!
//! [`Workspace`] keeps the factorization and iterates alive so that
//! sequences of closely related problems (only the linear cost changes)
//! warm start each other — which is how the game engines drive it.
//!
//! The [`reference`] module holds slow dense reference solvers used by the
//! verification suites; they share nothing with the iterative path.

mod csc;
mod ldl;
mod problem;
pub mod reference;
mod solver;

pub use csc::CscMatrix;
pub use problem::{QpError, QpProblem, QpSolution, QpStatus, Settings};
pub use solver::{kkt_residuals, solve_qp, solve_qp_prox_point, solve_strongly_convex, Workspace};
