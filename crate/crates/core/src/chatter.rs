//! Fast-switching approximation of an atomic control.
//!
//! `[0, T]` is cut into `i` equal subintervals; on each one the atoms are
//! frozen at its midpoint and the subinterval is split into consecutive
//! pieces whose lengths are proportional to the weights. The resulting
//! ordinary control only takes the atoms' values, and its trajectories and
//! functionals approach the averaged ones as `i` grows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate::SolutionCandidate;
use crate::canonical::{CanonicalProblem, ConstraintSpec, Mesh, ProblemError};
use crate::relax::RelaxedControl;
use crate::report::fmt_num;

#[derive(Debug, Error)]
pub enum ChatterError {
    #[error("partition count must be at least 1")]
    NoPartition,
    #[error("candidate does not match the problem: {0}")]
    Mismatch(String),
    #[error("subinterval {0} has no active atom")]
    EmptyInterval(usize),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("simulation did not settle after {0} iterations (residual {1:e})")]
    Diverged(usize, f64),
}

/// One constant piece of the switching control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub start: f64,
    pub end: f64,
    /// Frozen weight of the atom; the piece length is `gamma` times the
    /// subinterval length.
    pub gamma: f64,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subinterval {
    pub start: f64,
    pub end: f64,
    /// Pieces in atom order; they tile `[start, end]` exactly.
    pub pieces: Vec<Piece>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatterPlan {
    pub partitions: usize,
    pub subintervals: Vec<Subinterval>,
}

/// Freezes the atoms of `rc` (defined on `mesh`) at the midpoints of `i`
/// equal subintervals and splits each subinterval by weight.
pub fn build_plan(rc: &RelaxedControl, mesh: &Mesh, i: usize) -> Result<ChatterPlan, ChatterError> {
    if i == 0 {
        return Err(ChatterError::NoPartition);
    }
    if rc.intervals.len() != mesh.intervals() {
        return Err(ChatterError::Mismatch(format!(
            "{} control intervals on a mesh of {}",
            rc.intervals.len(),
            mesh.intervals()
        )));
    }
    let horizon = mesh.horizon();
    let cuts = Mesh::uniform(i, horizon);
    let mut subintervals = Vec::with_capacity(i);
    for r in 0..i {
        let (start, end) = (cuts.t(r), cuts.t(r + 1));
        let source = mesh.locate(cuts.midpoint(r));
        let atoms: Vec<_> = rc.active(source).collect();
        let total: f64 = atoms.iter().map(|a| a.gamma).sum();
        if atoms.is_empty() || total <= 0.0 {
            return Err(ChatterError::EmptyInterval(r));
        }
        let len = end - start;
        let mut pieces = Vec::with_capacity(atoms.len());
        let mut at = start;
        for (nu, atom) in atoms.iter().enumerate() {
            let gamma = atom.gamma / total;
            let stop = if nu + 1 == atoms.len() { end } else { (at + gamma * len).min(end) };
            pieces.push(Piece {
                start: at,
                end: stop,
                gamma,
                u: atom.u.clone(),
            });
            at = stop;
        }
        subintervals.push(Subinterval { start, end, pieces });
    }
    Ok(ChatterPlan {
        partitions: i,
        subintervals,
    })
}

impl ChatterPlan {
    pub fn pieces(&self) -> impl Iterator<Item = &Piece> {
        self.subintervals.iter().flat_map(|s| s.pieces.iter())
    }

    /// Control value at `t` (right-continuous, the last piece at `T`).
    pub fn control_at(&self, t: f64) -> &[f64] {
        let r = self
            .subintervals
            .partition_point(|s| s.end <= t)
            .min(self.subintervals.len() - 1);
        let sub = &self.subintervals[r];
        let k = sub.pieces.partition_point(|p| p.end <= t).min(sub.pieces.len() - 1);
        &sub.pieces[k].u
    }

    /// Whether every value lies in the declared control sets.
    pub fn admissible(&self, problem: &CanonicalProblem, tol: f64) -> bool {
        self.pieces().all(|p| {
            p.u.iter()
                .zip(&problem.controls)
                .all(|(v, c)| c.set.contains(*v, tol))
        })
    }

    /// Mesh whose nodes include every switching time, with each piece cut
    /// into `steps` equal steps; pieces of zero length are dropped. Returns
    /// the mesh and the control of each of its intervals.
    pub fn simulation_mesh(&self, steps: usize) -> (Mesh, Vec<Vec<f64>>) {
        let steps = steps.max(1);
        let mut nodes = vec![0.0];
        let mut controls = Vec::new();
        for p in self.pieces() {
            let len = p.end - p.start;
            if len <= 0.0 {
                continue;
            }
            for s in 1..=steps {
                let t = if s == steps { p.end } else { p.start + len * s as f64 / steps as f64 };
                if t > *nodes.last().unwrap() {
                    nodes.push(t);
                    controls.push(p.u.clone());
                }
            }
        }
        let mesh = Mesh::from_nodes(nodes).expect("pieces tile the horizon");
        (mesh, controls)
    }
}

/// Resolution of the chatter simulations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChatterConfig {
    /// Trapezoid steps per constant piece.
    pub steps: usize,
    /// Fixed-point sweeps allowed when solving for the states.
    pub max_iter: usize,
    /// Largest state-equation residual accepted.
    pub tol: f64,
}

impl Default for ChatterConfig {
    fn default() -> Self {
        ChatterConfig {
            steps: 16,
            max_iter: 200,
            tol: 1e-12,
        }
    }
}

/// Values at or below this are treated as converged when fitting slopes.
pub const SLOPE_FLOOR: f64 = 1e-9;

/// One row of a convergence study; the numbers are NaN when `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatterRow {
    pub partitions: usize,
    /// Criterion along the simulated trajectory.
    pub objective: f64,
    /// `|objective − averaged objective|`.
    pub gap: f64,
    /// Largest deviation of a constraint functional from its averaged value,
    /// both evaluated along the averaged trajectory.
    pub max_j: f64,
    /// Largest state deviation from the averaged trajectory.
    pub max_x_dev: f64,
    pub admissible: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    /// Criterion of the averaged candidate.
    pub averaged: f64,
    pub rows: Vec<ChatterRow>,
}

/// Sign `σ` such that a bound state's functional reads `σ (x − image)`.
fn state_sign(c: &ConstraintSpec) -> Option<(usize, f64)> {
    match c {
        ConstraintSpec::Ode { state, .. } | ConstraintSpec::Volterra { state, .. } => Some((*state, 1.0)),
        ConstraintSpec::Fredholm { state, .. } | ConstraintSpec::Convolution { state, .. } => Some((*state, -1.0)),
        _ => None,
    }
}

/// Solves the state equations for the control of `cand` by fixed-point
/// sweeps `x ← x − σ J`, starting from the states already stored.
pub fn simulate(problem: &CanonicalProblem, cand: &mut SolutionCandidate, cfg: &ChatterConfig) -> Result<(), ChatterError> {
    let bound: Vec<(usize, usize, f64)> = problem
        .constraints
        .iter()
        .enumerate()
        .filter_map(|(j, c)| state_sign(c).map(|(s, sign)| (j, s, sign)))
        .collect();
    if bound.is_empty() {
        return Ok(());
    }
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let f = problem.eval_functionals(cand)?;
        residual = bound
            .iter()
            .flat_map(|&(j, _, _)| f.values[j].iter())
            .fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
        let scale = cand.states.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        if residual <= cfg.tol * scale {
            return Ok(());
        }
        if !residual.is_finite() {
            break;
        }
        for &(j, s, sign) in &bound {
            for (x, r) in cand.states.iter_mut().zip(&f.values[j]) {
                x[s] -= sign * r;
            }
        }
    }
    Err(ChatterError::Diverged(cfg.max_iter, residual))
}

/// Candidate on `mesh` with the averaged trajectory interpolated to its nodes.
fn on_mesh(problem: &CanonicalProblem, relaxed: &SolutionCandidate, mesh: Mesh, control: RelaxedControl) -> SolutionCandidate {
    let columns: Vec<Vec<f64>> = (0..problem.n_states())
        .map(|s| relaxed.states.iter().map(|x| x[s]).collect())
        .collect();
    let states = mesh
        .nodes()
        .iter()
        .map(|&t| columns.iter().map(|c| relaxed.mesh.interpolate(c, t)).collect())
        .collect();
    let mut cand = SolutionCandidate::new(problem, mesh, states, control);
    cand.params = relaxed.params.clone();
    cand
}

fn study_row(problem: &CanonicalProblem, relaxed: &SolutionCandidate, averaged: f64, i: usize, cfg: &ChatterConfig) -> Result<ChatterRow, ChatterError> {
    let plan = build_plan(&relaxed.control, &relaxed.mesh, i)?;
    let (mesh, controls) = plan.simulation_mesh(cfg.steps);
    let atoms = (0..mesh.intervals())
        .map(|k| relaxed.control.intervals[relaxed.mesh.locate(mesh.midpoint(k))].clone())
        .collect();
    let reference = on_mesh(problem, relaxed, mesh.clone(), RelaxedControl { intervals: atoms });
    let mut chatter = on_mesh(problem, relaxed, mesh, RelaxedControl::classical(controls));

    let j_bar = problem.eval_functionals(&reference)?;
    let j_i = problem.eval_functionals(&chatter)?;
    let max_j = j_i
        .values
        .iter()
        .flatten()
        .zip(j_bar.values.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    simulate(problem, &mut chatter, cfg)?;
    let objective = problem.criterion_value(&chatter)?;
    let max_x_dev = chatter
        .states
        .iter()
        .flatten()
        .zip(reference.states.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(ChatterRow {
        partitions: i,
        objective,
        gap: (objective - averaged).abs(),
        max_j,
        max_x_dev,
        admissible: plan.admissible(problem, 1e-12),
        error: None,
    })
}

/// Simulates the switching approximation for every partition count in
/// `counts`; rows run in parallel and fail independently.
pub fn convergence_study(problem: &CanonicalProblem, relaxed: &SolutionCandidate, counts: &[usize], cfg: &ChatterConfig) -> Result<ConvergenceStudy, ChatterError> {
    relaxed.check_shape(problem).map_err(ChatterError::Mismatch)?;
    let averaged = problem.criterion_value(relaxed)?;
    let rows = counts
        .par_iter()
        .map(|&i| {
            study_row(problem, relaxed, averaged, i, cfg).unwrap_or_else(|e| ChatterRow {
                partitions: i,
                objective: f64::NAN,
                gap: f64::NAN,
                max_j: f64::NAN,
                max_x_dev: f64::NAN,
                admissible: false,
                error: Some(e.to_string()),
            })
        })
        .collect();
    Ok(ConvergenceStudy { averaged, rows })
}

/// Least-squares slope of `ln v` against `ln i`, skipping values at or below
/// [`SLOPE_FLOOR`]; `None` when fewer than two points remain.
pub fn loglog_slope(points: &[(usize, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, v)| v.is_finite() && *v > SLOPE_FLOOR)
        .map(|&(i, v)| ((i as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

impl ConvergenceStudy {
    fn slope_of(&self, pick: impl Fn(&ChatterRow) -> f64) -> Option<f64> {
        let pts: Vec<(usize, f64)> = self.rows.iter().map(|r| (r.partitions, pick(r))).collect();
        loglog_slope(&pts)
    }

    pub fn gap_slope(&self) -> Option<f64> {
        self.slope_of(|r| r.gap)
    }

    pub fn constraint_slope(&self) -> Option<f64> {
        self.slope_of(|r| r.max_j)
    }

    pub fn state_slope(&self) -> Option<f64> {
        self.slope_of(|r| r.max_x_dev)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,I_i,Ibar,gapI,maxJ,maxXdev\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.partitions,
                fmt_num(r.objective),
                fmt_num(self.averaged),
                fmt_num(r.gap),
                fmt_num(r.max_j),
                fmt_num(r.max_x_dev)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::load_problem;
    use crate::relax::Atom;

    const SLIDING: &str = "horizon 1\nstate x init 0\ncontrol u set -1 1\ncriterion integral \"-x^2\"\nconstraint ode x \"u\"\n";

    fn split(n: usize, weights: &[f64], values: &[f64]) -> RelaxedControl {
        let atoms: Vec<Atom> = weights
            .iter()
            .zip(values)
            .map(|(&gamma, &u)| Atom { gamma, u: vec![u] })
            .collect();
        RelaxedControl {
            intervals: vec![atoms; n],
        }
    }

    fn sliding_candidate(n: usize) -> (CanonicalProblem, SolutionCandidate) {
        let p = load_problem(SLIDING).unwrap();
        let mesh = Mesh::uniform(n, 1.0);
        let states = vec![vec![0.0]; mesh.len()];
        let cand = SolutionCandidate::new(&p, mesh, states, split(n, &[0.5, 0.5], &[-1.0, 1.0]));
        (p, cand)
    }

    #[test]
    fn even_split_alternates() {
        let plan = build_plan(&split(10, &[0.5, 0.5], &[-1.0, 1.0]), &Mesh::uniform(10, 1.0), 4).unwrap();
        let pieces: Vec<&Piece> = plan.pieces().collect();
        assert_eq!(pieces.len(), 8);
        for (k, p) in pieces.iter().enumerate() {
            assert!((p.end - p.start - 0.125).abs() < 1e-15);
            assert_eq!(p.u[0], if k % 2 == 0 { -1.0 } else { 1.0 });
        }
        assert_eq!(plan.control_at(0.2), &[1.0]);
        assert_eq!(plan.control_at(1.0), &[1.0]);
    }

    #[test]
    fn pieces_follow_weights() {
        let plan = build_plan(&split(3, &[0.25, 0.75], &[0.0, 2.0]), &Mesh::uniform(3, 2.0), 2).unwrap();
        for sub in &plan.subintervals {
            let len = sub.end - sub.start;
            assert!(((sub.pieces[0].end - sub.pieces[0].start) / len - 0.25).abs() < 1e-14);
            assert_eq!(sub.pieces.last().unwrap().end, sub.end);
        }
    }

    #[test]
    fn single_atom_is_plain_sampling() {
        let rc = RelaxedControl::classical((0..8).map(|k| vec![k as f64]).collect());
        let plan = build_plan(&rc, &Mesh::uniform(8, 1.0), 4).unwrap();
        assert!(plan.subintervals.iter().all(|s| s.pieces.len() == 1));
        let sampled: Vec<f64> = plan.pieces().map(|p| p.u[0]).collect();
        assert_eq!(sampled, vec![1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn zero_partitions_rejected() {
        let rc = split(2, &[1.0], &[0.0]);
        assert!(matches!(build_plan(&rc, &Mesh::uniform(2, 1.0), 0), Err(ChatterError::NoPartition)));
    }

    #[test]
    fn sliding_gap_matches_triangle_wave() {
        let (p, cand) = sliding_candidate(20);
        let counts = [4, 8, 16, 32];
        let study = convergence_study(&p, &cand, &counts, &ChatterConfig::default()).unwrap();
        assert_eq!(study.averaged, 0.0);
        for r in &study.rows {
            let i = r.partitions as f64;
            assert!(r.error.is_none() && r.admissible);
            assert!((r.gap * 12.0 * i * i - 1.0).abs() < 0.01, "i={} gap={}", i, r.gap);
            assert!((r.max_x_dev * 2.0 * i - 1.0).abs() < 1e-9);
            assert!((r.max_j * 2.0 * i - 1.0).abs() < 1e-9);
        }
        assert!((study.gap_slope().unwrap() + 2.0).abs() < 0.02);
        assert!((study.constraint_slope().unwrap() + 1.0).abs() < 1e-6);
        assert!(study.to_csv().starts_with("i,I_i,Ibar,gapI,maxJ,maxXdev\n4,"));
    }

    #[test]
    fn classical_control_has_no_gap() {
        let p = load_problem(&SLIDING.replace("set -1 1", "box -1 1")).unwrap();
        let mesh = Mesh::uniform(16, 1.0);
        let states = mesh.nodes().iter().map(|&t| vec![0.5 * t]).collect();
        let cand = SolutionCandidate::new(&p, mesh, states, RelaxedControl::classical(vec![vec![0.5]; 16]));
        let study = convergence_study(&p, &cand, &[4, 8], &ChatterConfig::default()).unwrap();
        for r in &study.rows {
            assert!(r.gap < 1e-3, "gap {}", r.gap);
            assert!(r.max_x_dev < 1e-12 && r.max_j < 1e-12);
        }
        assert_eq!(study.constraint_slope(), None);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(usize, f64)> = [2usize, 4, 8].iter().map(|&i| (i, 3.0 / (i * i * i) as f64)).collect();
        assert!((loglog_slope(&pts).unwrap() + 3.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&[(2, 1e-12), (4, 1e-13)]), None);
    }
}
