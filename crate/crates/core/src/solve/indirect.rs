use rayon::prelude::*;

use crate::candidate::{Multiplier, SolutionCandidate};
use crate::canonical::{ConstraintSpec, ControlSet, CriterionPart, Mesh};
use crate::expr::BoundExpr;
use crate::lagrange::{Group, LagrangeSystem, Weight};
use crate::relax::RelaxedControl;

use super::{maximize_h, SolveError, SolverConfig};

/// Checks that the problem is a plain differential one: every constraint
/// is an ODE (or one equality at the horizon), every state has an ODE, all
/// controls are first-group and every event sits at the horizon.
pub fn supports_indirect(sys: &LagrangeSystem) -> Result<(), SolveError> {
    let p = &sys.problem;
    let unsupported = |m: &str| Err(SolveError::Unsupported(format!("indirect sweep: {}", m)));
    let mut bound = vec![false; p.n_states()];
    let mut terminal = 0;
    for c in &p.constraints {
        match c {
            ConstraintSpec::Ode { state, .. } => bound[*state] = true,
            ConstraintSpec::TerminalEq { at, .. } if *at == p.horizon => terminal += 1,
            _ => return unsupported("only ode constraints and one terminal equality at the horizon"),
        }
    }
    if terminal > 1 {
        return unsupported("more than one terminal equality");
    }
    if bound.iter().any(|b| !b) {
        return unsupported("every state needs an ode constraint");
    }
    for part in &p.criterion.parts {
        match part {
            CriterionPart::Integral(_) => {}
            CriterionPart::Terminal { at, .. } if *at == p.horizon => {}
            _ => return unsupported("criterion must be an integral plus terms at the horizon"),
        }
    }
    if sys.classification.entries.iter().any(|(n, g)| p.controls.iter().any(|c| &c.name == n) && *g != Group::First) {
        return unsupported("all controls must be first-group");
    }
    Ok(())
}

struct Sweep<'a> {
    sys: &'a LagrangeSystem,
    mesh: Mesh,
    sets: Vec<ControlSet>,
    /// ODE right-hand side and constraint index for each state.
    rhs: Vec<(usize, BoundExpr)>,
    terminal: Option<(usize, BoundExpr)>,
    params: Vec<f64>,
    cfg: &'a SolverConfig,
}

struct SweepState {
    x: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl<'a> Sweep<'a> {
    fn new(sys: &'a LagrangeSystem, cfg: &'a SolverConfig, params: Vec<f64>) -> Result<Self, SolveError> {
        let p = &sys.problem;
        let layout = p.layout();
        let mut rhs: Vec<Option<(usize, BoundExpr)>> = vec![None; p.n_states()];
        let mut terminal = None;
        for (j, c) in p.constraints.iter().enumerate() {
            match c {
                ConstraintSpec::Ode { state, rhs: f } => rhs[*state] = Some((j, f.bind(&layout).map_err(crate::lagrange::LagrangeError::from)?)),
                ConstraintSpec::TerminalEq { f, .. } => terminal = Some((j, f.bind(&layout).map_err(crate::lagrange::LagrangeError::from)?)),
                _ => {}
            }
        }
        Ok(Sweep {
            sys,
            mesh: Mesh::uniform(cfg.mesh, p.horizon),
            sets: p.controls.iter().map(|c| c.set.clone()).collect(),
            rhs: rhs.into_iter().map(|r| r.expect("checked by supports_indirect")).collect(),
            terminal,
            params,
            cfg,
        })
    }

    fn dynamics(&self, slots: &mut [f64], t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.sys.load(slots, t, x, &[], &self.params);
        self.sys.set_controls(slots, u);
        self.rhs.iter().map(|(_, f)| f.eval(slots)).collect()
    }

    /// Term weights from local adjoint values (ψ̇ terms weigh zero so that
    /// the interval gradient is exactly the adjoint right-hand side).
    fn weights(&self, psi: &[f64], lambda_t: f64) -> Vec<f64> {
        self.sys
            .terms
            .iter()
            .map(|t| match t.weight {
                Weight::Lambda0 => 1.0,
                Weight::Adjoint(j) => self.rhs.iter().position(|(c, _)| *c == j).map_or(0.0, |s| psi[s]),
                Weight::Multiplier(j) if self.terminal.as_ref().is_some_and(|(c, _)| *c == j) => lambda_t,
                _ => 0.0,
            })
            .collect()
    }

    fn adjoint_rhs(&self, slots: &mut [f64], t: f64, x: &[f64], u: &[f64], psi: &[f64], lambda_t: f64) -> Vec<f64> {
        let w = self.weights(psi, lambda_t);
        self.sys.load(slots, t, x, &[], &self.params);
        self.sys.set_controls(slots, u);
        (0..x.len())
            .map(|s| -self.sys.grad_interval(self.sys.problem.slot_state(s), slots, &w, None, None))
            .collect()
    }

    fn forward(&self, u: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let p = &self.sys.problem;
        let mut slots = self.sys.new_slots();
        let mut x = vec![(0..p.n_states()).map(|s| p.initial_value(s)).collect::<Vec<f64>>()];
        for (i, ui) in u.iter().enumerate() {
            let (t0, t1, h) = (self.mesh.t(i), self.mesh.t(i + 1), self.mesh.h(i));
            let xi = &x[i];
            let f1 = self.dynamics(&mut slots, t0, xi, ui);
            let xp: Vec<f64> = xi.iter().zip(&f1).map(|(a, f)| a + h * f).collect();
            let f2 = self.dynamics(&mut slots, t1, &xp, ui);
            let next = (0..xi.len()).map(|s| xi[s] + 0.5 * h * (f1[s] + f2[s])).collect();
            x.push(next);
        }
        x
    }

    fn backward(&self, x: &[Vec<f64>], u: &[Vec<f64>], lambda_t: f64) -> Vec<Vec<f64>> {
        let p = &self.sys.problem;
        let n = self.mesh.intervals();
        let ns = p.n_states();
        let mut slots = self.sys.new_slots();
        let zero = vec![0.0; ns];
        let w = self.weights(&zero, lambda_t);
        self.sys.load(&mut slots, p.horizon, &x[n], &[], &self.params);
        self.sys.set_controls(&mut slots, &u[n - 1]);
        let end: Vec<f64> = (0..ns)
            .map(|s| self.sys.grad_event(p.horizon, p.slot_state(s), &mut slots, &w, None))
            .collect();
        let mut psi = vec![zero; n + 1];
        psi[n] = end;
        for i in (0..n).rev() {
            let (t0, t1, h) = (self.mesh.t(i), self.mesh.t(i + 1), self.mesh.h(i));
            let g1 = self.adjoint_rhs(&mut slots, t1, &x[i + 1], &u[i], &psi[i + 1], lambda_t);
            let pp: Vec<f64> = psi[i + 1].iter().zip(&g1).map(|(a, g)| a - h * g).collect();
            let g2 = self.adjoint_rhs(&mut slots, t0, &x[i], &u[i], &pp, lambda_t);
            psi[i] = (0..ns).map(|s| psi[i + 1][s] - 0.5 * h * (g1[s] + g2[s])).collect();
        }
        psi
    }

    fn argmax(&self, x: &[Vec<f64>], psi: &[Vec<f64>], lambda_t: f64) -> Result<Vec<Vec<f64>>, SolveError> {
        (0..self.mesh.intervals())
            .into_par_iter()
            .map(|i| {
                let xm: Vec<f64> = x[i].iter().zip(&x[i + 1]).map(|(a, b)| 0.5 * (a + b)).collect();
                let pm: Vec<f64> = psi[i].iter().zip(&psi[i + 1]).map(|(a, b)| 0.5 * (a + b)).collect();
                let w = self.weights(&pm, lambda_t);
                let mut slots = self.sys.new_slots();
                self.sys.load(&mut slots, self.mesh.midpoint(i), &xm, &[], &self.params);
                let (u, _) = maximize_h(
                    |u| {
                        self.sys.set_controls(&mut slots, u);
                        self.sys.hamiltonian(&mut slots, &w, None)
                    },
                    &self.sets,
                    self.cfg,
                )?;
                Ok(u)
            })
            .collect()
    }

    /// Damped fixed-point sweep for a fixed terminal multiplier.
    fn run(&self, lambda_t: f64, start: Vec<Vec<f64>>) -> Result<SweepState, SolveError> {
        let mut u = start;
        let mut x = self.forward(&u);
        let mut psi = self.backward(&x, &u, lambda_t);
        for _ in 0..self.cfg.max_sweeps {
            let target = self.argmax(&x, &psi, lambda_t)?;
            let mut change = 0.0f64;
            for (ui, ti) in u.iter_mut().zip(&target) {
                for (d, (v, t)) in ui.iter_mut().zip(ti).enumerate() {
                    let next = match self.sets[d] {
                        ControlSet::Finite(_) => *t,
                        ControlSet::Box { .. } => *v + self.cfg.damping * (t - *v),
                    };
                    change = change.max((next - *v).abs());
                    *v = next;
                }
            }
            let nx = self.forward(&u);
            let npsi = self.backward(&nx, &u, lambda_t);
            change = change.max(max_diff(&nx, &x)).max(max_diff(&npsi, &psi));
            x = nx;
            psi = npsi;
            if !change.is_finite() {
                return Err(SolveError::Divergence { iterations: 0, residual: change });
            }
            if change < self.cfg.tol {
                return Ok(SweepState { x, psi, u });
            }
        }
        let target = self.argmax(&x, &psi, lambda_t)?;
        let residual = target
            .iter()
            .zip(&u)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        Err(SolveError::Divergence {
            iterations: self.cfg.max_sweeps,
            residual,
        })
    }

    fn terminal_residual(&self, st: &SweepState) -> f64 {
        let Some((_, f)) = &self.terminal else { return 0.0 };
        let n = self.mesh.intervals();
        let mut slots = self.sys.new_slots();
        self.sys.load(&mut slots, self.sys.problem.horizon, &st.x[n], &[], &self.params);
        self.sys.set_controls(&mut slots, &st.u[n - 1]);
        f.eval(&slots)
    }
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Forward–backward sweep: states forward and adjoints backward with Heun's
/// method, controls moved toward the midpoint maximizers of `H`. A terminal
/// equality multiplier is found by secant iteration on the constraint value.
pub fn solve_indirect(sys: &LagrangeSystem, cfg: &SolverConfig) -> Result<SolutionCandidate, SolveError> {
    let params = sys
        .problem
        .params
        .iter()
        .map(|p| p.bounds.map_or(0.0, |(lo, hi)| 0.5 * (lo + hi)))
        .collect();
    solve_indirect_with(sys, cfg, params, None)
}

pub(crate) fn solve_indirect_with(sys: &LagrangeSystem, cfg: &SolverConfig, params: Vec<f64>, warm: Option<&[Vec<f64>]>) -> Result<SolutionCandidate, SolveError> {
    supports_indirect(sys)?;
    let p = &sys.problem;
    let sweep = Sweep::new(sys, cfg, params)?;
    let start = match warm {
        Some(u) if u.len() == cfg.mesh => u.to_vec(),
        _ => vec![p.controls.iter().map(|c| c.set.neutral()).collect(); cfg.mesh],
    };
    let (state, lambda_t) = if sweep.terminal.is_none() {
        (sweep.run(0.0, start)?, 0.0)
    } else {
        let (mut l0, mut l1) = (0.0, 1.0);
        let s0 = sweep.run(l0, start)?;
        let mut r0 = sweep.terminal_residual(&s0);
        let mut s1 = sweep.run(l1, s0.u.clone())?;
        let mut r1 = sweep.terminal_residual(&s1);
        let mut iterations = 0;
        while r1.abs() > cfg.tol.max(1e-12) {
            iterations += 1;
            if iterations > 100 || r1 == r0 {
                return Err(SolveError::Divergence { iterations, residual: r1.abs() });
            }
            let l2 = l1 - r1 * (l1 - l0) / (r1 - r0);
            let s2 = sweep.run(l2, s1.u.clone())?;
            (l0, r0) = (l1, r1);
            l1 = l2;
            r1 = sweep.terminal_residual(&s2);
            s1 = s2;
        }
        (s1, l1)
    };
    let mesh = sweep.mesh.clone();
    let mut cand = SolutionCandidate::new(p, mesh, state.x, RelaxedControl::classical(state.u));
    cand.params = sweep.params.clone();
    for (s, (j, _)) in sweep.rhs.iter().enumerate() {
        cand.multipliers[*j] = Multiplier::Adjoint(state.psi.iter().map(|v| v[s]).collect());
    }
    if let Some((j, _)) = &sweep.terminal {
        cand.multipliers[*j] = Multiplier::Scalar(lambda_t);
    }
    cand.objective = p.criterion_value(&cand)?;
    Ok(cand)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::load_problem;

    fn sys(text: &str) -> LagrangeSystem {
        LagrangeSystem::assemble(&load_problem(text).unwrap()).unwrap()
    }

    #[test]
    fn lq_value_and_trajectory() {
        let s = sys("horizon 1\nstate x init 1\ncontrol u box -10 10\ncriterion integral \"-(x^2 + u^2)\"\nconstraint ode x \"u\"\n");
        let c = solve_indirect(&s, &SolverConfig::default()).unwrap();
        assert!((c.objective + 1f64.tanh()).abs() < 1e-4, "{}", c.objective);
        for (k, t) in c.mesh.nodes().iter().enumerate() {
            let exact = (1.0 - t).cosh() / 1f64.cosh();
            assert!((c.states[k][0] - exact).abs() < 1e-4);
        }
    }

    #[test]
    fn terminal_equality_multiplier() {
        let s = sys("horizon 1\nstate x init 0\ncontrol u box -10 10\ncriterion integral \"-u^2\"\nconstraint ode x \"u\"\nconstraint terminal \"x - 1\" at 1\n");
        let c = solve_indirect(&s, &SolverConfig::default()).unwrap();
        assert!((c.multipliers[1].scalar().unwrap() - 2.0).abs() < 1e-6);
        assert!((c.objective + 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_ode_mix() {
        let s = sys("horizon 1\nstate x\ncontrol u box -1 1\ncriterion integral \"-x^2\"\nconstraint pointwise \"x - u\"\n");
        assert!(matches!(supports_indirect(&s), Err(SolveError::Unsupported(_))));
    }
}
