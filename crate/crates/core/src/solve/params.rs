use crate::candidate::SolutionCandidate;
use crate::lagrange::{LagrangeSystem, MultiplierView};

use super::indirect::solve_indirect_with;
use super::{SolveError, SolverConfig};

const MAX_STEPS: usize = 200;
const GRAD_TOL: f64 = 1e-7;

fn project(sys: &LagrangeSystem, a: &mut [f64]) {
    for (v, p) in a.iter_mut().zip(&sys.problem.params) {
        if let Some((lo, hi)) = p.bounds {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Projected gradient on the component that can move: zero where the
/// parameter sits at a bound and the gradient points outward.
pub(crate) fn projected(sys: &LagrangeSystem, a: &[f64], g: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(g)
        .zip(&sys.problem.params)
        .map(|((v, gi), p)| match p.bounds {
            Some((lo, _)) if *v <= lo && *gi < 0.0 => 0.0,
            Some((_, hi)) if *v >= hi && *gi > 0.0 => 0.0,
            _ => *gi,
        })
        .collect()
}

/// Projected gradient ascent over the parameters, re-solving the inner
/// trajectory by the indirect sweep at every trial point. The gradient is
/// `∂S/∂a` from the Lagrange function at the current solution.
pub fn optimize_params(sys: &LagrangeSystem, cfg: &SolverConfig) -> Result<SolutionCandidate, SolveError> {
    let mut a: Vec<f64> = sys
        .problem
        .params
        .iter()
        .map(|p| p.bounds.map_or(0.0, |(lo, hi)| 0.5 * (lo + hi)))
        .collect();
    let mut cand = solve_indirect_with(sys, cfg, a.clone(), None)?;
    let mut step = 1.0;
    for _ in 0..MAX_STEPS {
        let g = sys.param_gradient(&cand, &MultiplierView::new(&cand));
        let pg = projected(sys, &a, &g);
        if pg.iter().all(|v| v.abs() <= GRAD_TOL) {
            return Ok(cand);
        }
        loop {
            let mut trial: Vec<f64> = a.iter().zip(&g).map(|(v, gi)| v + step * gi).collect();
            project(sys, &mut trial);
            let moved: f64 = trial.iter().zip(&a).zip(&g).map(|((t, v), gi)| (t - v) * gi).sum();
            let next = solve_indirect_with(sys, cfg, trial.clone(), Some(&warm(&cand)))?;
            if next.objective >= cand.objective + 1e-4 * moved {
                a = trial;
                cand = next;
                step = (step * 2.0).min(1e6);
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                return Ok(cand);
            }
        }
    }
    let g = sys.param_gradient(&cand, &MultiplierView::new(&cand));
    Err(SolveError::Divergence {
        iterations: MAX_STEPS,
        residual: projected(sys, &a, &g).iter().fold(0.0, |m: f64, v| m.max(v.abs())),
    })
}

fn warm(c: &SolutionCandidate) -> Vec<Vec<f64>> {
    (0..c.mesh.intervals()).map(|i| c.control.mean(i)).collect()
}
