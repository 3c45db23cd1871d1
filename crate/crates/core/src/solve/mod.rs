//! Numerical solvers producing [`SolutionCandidate`]s.
//!
//! * [`solve_indirect`]: forward–backward sweep on the state and adjoint
//!   equations with pointwise maximization of `H`.
//! * [`solve_collocation`]: direct transcription with an augmented
//!   Lagrangian; also solves the relaxed (atomic-control) problem.
//! * [`optimize_params`]: outer projected-gradient loop over parameters.

mod collocation;
mod indirect;
mod maximize;
mod params;

pub use collocation::solve_collocation;
pub use indirect::{solve_indirect, supports_indirect};
pub use maximize::maximize_h;
pub use params::optimize_params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::ProblemError;
use crate::candidate::SolutionCandidate;
use crate::lagrange::{LagrangeError, LagrangeSystem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("{0}")]
    Unsupported(String),
    #[error("no sweep convergence after {iterations} iterations (last change {residual:e})")]
    Divergence { iterations: usize, residual: f64 },
    #[error("constraints stalled at residual {residual:e}")]
    Infeasible { residual: f64 },
    #[error("H is NaN at every grid point")]
    NanHamiltonian,
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Lagrange(#[from] LagrangeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Number of mesh intervals.
    pub mesh: usize,
    /// Grid points per control dimension for `H` maximization.
    pub ugrid: usize,
    /// Golden-section passes per box dimension after the grid search.
    pub refine_passes: usize,
    /// Sweep iteration cap of the indirect solver.
    pub max_sweeps: usize,
    /// Convergence tolerance of sweeps and secant iterations.
    pub tol: f64,
    /// Relaxation of control updates in the sweep (finite sets are not damped).
    pub damping: f64,
    /// Solve the averaged problem over atomic controls.
    pub relax: bool,
    /// Number of penalty levels: the penalty starts at `penalty_start` and may
    /// grow tenfold `penalty_rounds - 1` times.
    pub penalty_rounds: usize,
    pub penalty_start: f64,
    /// Tolerance on the scaled projected gradient of each inner solve.
    pub inner_tol: f64,
    pub max_inner: usize,
    /// Constraint residual above which collocation reports infeasibility.
    pub feas_tol: f64,
    /// Seed for the randomized parts of initial guesses.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mesh: 200,
            ugrid: 41,
            refine_passes: 3,
            max_sweeps: 2000,
            tol: 1e-7,
            damping: 0.5,
            relax: false,
            penalty_rounds: 6,
            penalty_start: 10.0,
            inner_tol: 1e-8,
            max_inner: 20000,
            feas_tol: 1e-5,
            seed: 0,
        }
    }
}

/// Solver selection for [`solve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Indirect,
    Collocation,
    /// Indirect when the problem allows it, else collocation.
    Auto,
}

/// Builds the Lagrange system and runs the chosen solver.
pub fn solve(problem: &crate::canonical::CanonicalProblem, method: Method, cfg: &SolverConfig) -> Result<(LagrangeSystem, SolutionCandidate), SolveError> {
    let sys = LagrangeSystem::assemble(problem)?;
    let use_indirect = match method {
        Method::Indirect => true,
        Method::Collocation => false,
        Method::Auto => !cfg.relax && supports_indirect(&sys).is_ok(),
    };
    let cand = if use_indirect {
        if problem.n_params() > 0 {
            optimize_params(&sys, cfg)?
        } else {
            solve_indirect(&sys, cfg)?
        }
    } else {
        solve_collocation(&sys, cfg)?
    };
    Ok((sys, cand))
}
