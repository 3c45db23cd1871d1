//! Numerical solution candidates: nodal states, per-interval (possibly
//! relaxed) controls, parameters and multiplier estimates.

use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalProblem, ConstraintKind, ControlSet, Mesh};
use crate::relax::RelaxedControl;
use crate::report::fmt_num;

/// Multiplier attached to one constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Multiplier {
    None,
    /// Integral and terminal equalities carry a single number.
    Scalar(f64),
    /// τ-indexed constraints carry nodal values of `λ_j(τ)`.
    Function(Vec<f64>),
    /// Differential constraints carry the integrated multiplier `ψ`.
    Adjoint(Vec<f64>),
}

impl Multiplier {
    /// Zero multiplier of the shape matching a constraint kind.
    pub fn zero_for(kind: ConstraintKind, nodes: usize) -> Multiplier {
        match kind {
            ConstraintKind::Ode => Multiplier::Adjoint(vec![0.0; nodes]),
            ConstraintKind::IntegralEq | ConstraintKind::TerminalEq => Multiplier::Scalar(0.0),
            _ => Multiplier::Function(vec![0.0; nodes]),
        }
    }

    pub fn nodal(&self) -> Option<&[f64]> {
        match self {
            Multiplier::Function(v) | Multiplier::Adjoint(v) => Some(v),
            _ => None,
        }
    }

    pub fn nodal_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            Multiplier::Function(v) | Multiplier::Adjoint(v) => Some(v),
            _ => None,
        }
    }

    pub fn scalar(&self) -> Option<f64> {
        match self {
            Multiplier::Scalar(v) => Some(*v),
            _ => None,
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            Multiplier::None => 0.0,
            Multiplier::Scalar(v) => v.abs(),
            Multiplier::Function(v) | Multiplier::Adjoint(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        match self {
            Multiplier::None => {}
            Multiplier::Scalar(v) => *v *= factor,
            Multiplier::Function(v) | Multiplier::Adjoint(v) => v.iter_mut().for_each(|x| *x *= factor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionCandidate {
    pub mesh: Mesh,
    /// `[node][state]`, piecewise linear in time.
    pub states: Vec<Vec<f64>>,
    /// Per-interval atoms; a classical control has one atom of weight 1.
    pub control: RelaxedControl,
    /// `[node][slack]`
    pub slacks: Vec<Vec<f64>>,
    pub params: Vec<f64>,
    /// One entry per constraint, in declaration order.
    pub multipliers: Vec<Multiplier>,
    pub lambda0: f64,
    pub objective: f64,
}

impl SolutionCandidate {
    /// A candidate with zero slacks, default parameters and zero multipliers.
    pub fn new(problem: &CanonicalProblem, mesh: Mesh, states: Vec<Vec<f64>>, control: RelaxedControl) -> Self {
        let nodes = mesh.len();
        SolutionCandidate {
            slacks: vec![vec![0.0; problem.n_slacks()]; nodes],
            params: problem
                .params
                .iter()
                .map(|p| p.bounds.map_or(0.0, |(lo, hi)| 0.5 * (lo + hi)))
                .collect(),
            multipliers: problem
                .constraints
                .iter()
                .map(|c| Multiplier::zero_for(c.kind(), nodes))
                .collect(),
            lambda0: 1.0,
            objective: 0.0,
            mesh,
            states,
            control,
        }
    }

    /// Constant-in-time initial guess: states at their initial values and
    /// controls at the admissible value nearest zero.
    pub fn initial_guess(problem: &CanonicalProblem, mesh: Mesh) -> Self {
        let x: Vec<f64> = (0..problem.n_states()).map(|i| problem.initial_value(i)).collect();
        let u: Vec<f64> = problem.controls.iter().map(|c| c.set.neutral()).collect();
        let states = vec![x; mesh.len()];
        let control = RelaxedControl::classical(vec![u; mesh.intervals()]);
        Self::new(problem, mesh, states, control)
    }

    pub fn is_classical(&self) -> bool {
        self.control.is_classical()
    }

    /// Scalar multiplier of the first terminal equality, if any.
    pub fn lambda_tilde(&self, problem: &CanonicalProblem) -> Option<f64> {
        problem
            .constraints
            .iter()
            .position(|c| c.kind() == ConstraintKind::TerminalEq)
            .and_then(|j| self.multipliers[j].scalar())
    }

    /// Checks array shapes against the problem and admissibility of controls.
    pub fn check_shape(&self, problem: &CanonicalProblem) -> Result<(), String> {
        let nodes = self.mesh.len();
        if self.states.len() != nodes || self.states.iter().any(|x| x.len() != problem.n_states()) {
            return Err("state array does not match mesh and problem".into());
        }
        if self.slacks.len() != nodes || self.slacks.iter().any(|z| z.len() != problem.n_slacks()) {
            return Err("slack array does not match mesh and problem".into());
        }
        if self.params.len() != problem.n_params() {
            return Err("parameter count does not match problem".into());
        }
        if self.multipliers.len() != problem.constraints.len() {
            return Err("multiplier count does not match problem".into());
        }
        for m in &self.multipliers {
            if m.nodal().is_some_and(|v| v.len() != nodes) {
                return Err("multiplier array does not match mesh".into());
            }
        }
        if self.control.intervals.len() != self.mesh.intervals() {
            return Err("control array does not match mesh".into());
        }
        for (i, atoms) in self.control.intervals.iter().enumerate() {
            if atoms.is_empty() {
                return Err(format!("interval {} has no control atom", i));
            }
            for atom in atoms {
                if atom.u.len() != problem.n_controls() {
                    return Err(format!("interval {} has a control of the wrong dimension", i));
                }
                for (c, u) in problem.controls.iter().zip(&atom.u) {
                    if !c.set.contains(*u, 1e-9) {
                        return Err(format!("control `{}` = {} on interval {} is not admissible", c.name, u, i));
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodal table `t, x..., u..., psi..., lambda...`. Controls are the
    /// atom-weighted interval values, repeated at the right end node.
    pub fn to_csv(&self, problem: &CanonicalProblem) -> String {
        let mut header = vec!["t".to_string()];
        header.extend(problem.states.iter().map(|s| s.name.clone()));
        header.extend(problem.controls.iter().map(|c| c.name.clone()));
        for (j, m) in self.multipliers.iter().enumerate() {
            match m {
                Multiplier::Adjoint(_) => header.push(format!("psi_{}", j + 1)),
                Multiplier::Function(_) => header.push(format!("lambda_{}", j + 1)),
                _ => {}
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        let n = self.mesh.intervals();
        for k in 0..self.mesh.len() {
            let mut row = vec![fmt_num(self.mesh.t(k))];
            row.extend(self.states[k].iter().map(|v| fmt_num(*v)));
            row.extend(self.control.mean(k.min(n - 1)).iter().map(|v| fmt_num(*v)));
            for m in &self.multipliers {
                if let Some(v) = m.nodal() {
                    row.push(fmt_num(v[k]));
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn header_json(&self, problem: &CanonicalProblem, config: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "I": self.objective,
            "a": self.params,
            "lambda0": self.lambda0,
            "lambda_tilde": self.lambda_tilde(problem),
            "config": config,
            "candidate": self,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<SolutionCandidate, serde_json::Error> {
        serde_json::from_value(value.get("candidate").cloned().unwrap_or_else(|| value.clone()))
    }
}

/// Admissible control values for grid search.
pub fn control_grid(set: &ControlSet, points: usize) -> Vec<f64> {
    match set {
        ControlSet::Finite(v) => v.clone(),
        ControlSet::Box { lo, hi } => {
            if hi == lo || points < 2 {
                return vec![*lo];
            }
            (0..points)
                .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
                .collect()
        }
    }
}
