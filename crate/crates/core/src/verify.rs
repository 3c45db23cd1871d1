//! Residual checks of the first-order necessary conditions against a
//! candidate, and canned perturbations that spoil a good candidate in one
//! specific way.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::candidate::{control_grid, Multiplier, SolutionCandidate};
use crate::canonical::{ConstraintSpec, ControlSet};
use crate::lagrange::{At, Group, LagrangeSystem, MultiplierView, Support};
use crate::relax::{extend, Atom};
use crate::report::{fmt_num, table};

/// Tolerances of the individual checks.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyConfig {
    /// Relative tolerance of the maximum condition, scaled by `1 + max|H|`.
    pub h_tol: f64,
    pub stationarity_tol: f64,
    /// Integral identities and complementary slackness.
    pub integral_tol: f64,
    pub param_tol: f64,
    pub nontrivial_tol: f64,
    pub weight_tol: f64,
    /// Points per box control on the solver's grid; the verifier refines it.
    pub ugrid: usize,
    /// Refinement factor of the control grid relative to the solver's.
    pub grid_factor: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            h_tol: 1e-4,
            stationarity_tol: 5e-3,
            integral_tol: 1e-6,
            param_tol: 1e-5,
            nontrivial_tol: 1e-12,
            weight_tol: 1e-9,
            ugrid: 41,
            grid_factor: 4,
        }
    }
}

/// Cap on grid points per interval for multi-control maximization.
const GRID_BUDGET: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: &'static str,
    pub residual: f64,
    /// Time of the worst violation, when the check is pointwise.
    pub at: Option<f64>,
    pub tol: f64,
    pub pass: bool,
}

impl CheckEntry {
    fn new(name: &'static str, residual: f64, at: Option<f64>, tol: f64) -> CheckEntry {
        // NaN residuals fail
        CheckEntry { name, residual, at, tol, pass: residual <= tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    /// Applicable checks, sorted by name.
    pub entries: Vec<CheckEntry>,
    pub verdict: bool,
    pub nontrivial: bool,
}

impl VerificationReport {
    pub fn failed(&self) -> BTreeSet<&'static str> {
        self.entries.iter().filter(|e| !e.pass).map(|e| e.name).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "verdict": self.verdict,
            "nontrivial": self.nontrivial,
            "checks": self.entries.iter().map(|e| serde_json::json!({
                "name": e.name,
                "residual": e.residual,
                "at": e.at,
                "tolerance": e.tol,
                "pass": e.pass,
            })).collect::<Vec<_>>(),
        })
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .entries
            .iter()
            .map(|e| {
                vec![
                    e.name.to_string(),
                    fmt_num(e.residual),
                    e.at.map_or("-".into(), fmt_num),
                    fmt_num(e.tol),
                    if e.pass { "pass".into() } else { "FAIL".into() },
                ]
            })
            .collect();
        let mut out = table(&["check", "residual", "t", "tolerance", "status"], &rows);
        out.push_str(&format!("verdict: {}\n", if self.verdict { "pass" } else { "FAIL" }));
        out
    }
}

/// Atoms of interval `i` rescaled to unit mass; the weight check reports
/// the defect separately.
fn normalized(cand: &SolutionCandidate, i: usize) -> Vec<Atom> {
    let atoms = &cand.control.intervals[i];
    let s: f64 = atoms.iter().map(|a| a.gamma).sum();
    let s = if s > 0.0 { s } else { 1.0 };
    atoms.iter().map(|a| Atom { gamma: a.gamma / s, u: a.u.clone() }).collect()
}

fn midpoint_state(cand: &SolutionCandidate, i: usize) -> (Vec<f64>, Vec<f64>) {
    let avg = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect::<Vec<f64>>();
    (avg(&cand.states[i], &cand.states[i + 1]), avg(&cand.slacks[i], &cand.slacks[i + 1]))
}

fn distance_to_set(set: &ControlSet, v: f64) -> f64 {
    match set {
        ControlSet::Box { lo, hi } => (lo - v).max(v - hi).max(0.0),
        ControlSet::Finite(vals) => vals.iter().map(|w| (w - v).abs()).fold(f64::INFINITY, f64::min),
    }
}

/// Cartesian grid over the control sets, refined for box sets.
fn verification_grid(sets: &[ControlSet], cfg: &VerifyConfig) -> Vec<Vec<f64>> {
    let boxes = sets.iter().filter(|s| matches!(s, ControlSet::Box { .. })).count() as i32;
    let fine = (cfg.ugrid.max(2) - 1) * cfg.grid_factor.max(1) + 1;
    let per_dim = if boxes > 1 { fine.min((GRID_BUDGET as f64).powf(1.0 / boxes as f64) as usize).max(3) } else { fine };
    let mut grid = vec![Vec::new()];
    for s in sets {
        let axis = control_grid(s, per_dim);
        grid = grid
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    grid
}

/// Indices of intervals touching an interior event node.
fn event_intervals(sys: &LagrangeSystem, cand: &SolutionCandidate) -> BTreeSet<usize> {
    let n = cand.mesh.intervals();
    let mut out = BTreeSet::new();
    for at in sys.event_times() {
        let k = cand.mesh.snap(at);
        if k > 0 && k < n {
            out.insert(k - 1);
            out.insert(k);
        }
    }
    out
}

/// Candidate with every interval's atoms rescaled to unit mass.
fn normalized_candidate(cand: &SolutionCandidate) -> SolutionCandidate {
    let mut out = cand.clone();
    for i in 0..cand.mesh.intervals() {
        out.control.intervals[i] = normalized(cand, i);
    }
    out
}

fn is_first(sys: &LagrangeSystem, name: &str) -> bool {
    sys.classification.group(name).is_some_and(Group::is_first_somewhere)
}

/// Maximum condition at interval midpoints: every active atom must be
/// admissible and attain the grid maximum of `H`.
pub fn check_hmax(sys: &LagrangeSystem, cand: &SolutionCandidate, cfg: &VerifyConfig) -> Option<CheckEntry> {
    let p = &sys.problem;
    let first: Vec<bool> = p.controls.iter().map(|c| is_first(sys, &c.name)).collect();
    if !first.iter().any(|f| *f) || !sys.in_h.iter().any(|h| *h) {
        return None;
    }
    let sets: Vec<ControlSet> = p.controls.iter().map(|c| c.set.clone()).collect();
    let grid = verification_grid(&sets, cfg);
    let mv = MultiplierView::new(cand);
    let per_interval: Vec<(f64, f64, f64)> = (0..cand.mesh.intervals())
        .into_par_iter()
        .map(|i| {
            let mut slots = sys.new_slots();
            let (xm, zm) = midpoint_state(cand, i);
            let t = cand.mesh.midpoint(i);
            sys.load(&mut slots, t, &xm, &zm, &cand.params);
            let w = mv.term_weights(sys, At::Mid(i));
            let mut worst = 0.0f64;
            let mut scale = 0.0f64;
            for atom in cand.control.active(i) {
                let mut best = f64::NEG_INFINITY;
                let mut u = atom.u.clone();
                for g in &grid {
                    for d in 0..u.len() {
                        if first[d] {
                            u[d] = g[d];
                        }
                    }
                    sys.set_controls(&mut slots, &u);
                    let h = sys.hamiltonian(&mut slots, &w, Some(&mv));
                    best = best.max(h);
                    scale = scale.max(h.abs());
                }
                sys.set_controls(&mut slots, &atom.u);
                let h = sys.hamiltonian(&mut slots, &w, Some(&mv));
                let outside = atom
                    .u
                    .iter()
                    .zip(&sets)
                    .map(|(v, s)| distance_to_set(s, *v))
                    .fold(0.0, f64::max);
                let gap = best - h;
                worst = if gap.is_nan() { f64::NAN } else { worst.max(gap).max(outside) };
            }
            (worst, scale, t)
        })
        .collect();
    let scale = per_interval.iter().map(|r| r.1).fold(0.0, f64::max);
    let (residual, at) = worst_of(per_interval.iter().map(|r| (r.0, r.2)));
    Some(CheckEntry::new("h_max", residual, at, cfg.h_tol * (1.0 + scale)))
}

/// Largest residual (NaN dominates) and where it occurs.
fn worst_of(items: impl Iterator<Item = (f64, f64)>) -> (f64, Option<f64>) {
    let mut best = (0.0f64, None);
    for (r, t) in items {
        if r.is_nan() {
            return (f64::NAN, Some(t));
        }
        if r > best.0 || best.1.is_none() {
            best = (r.max(best.0), if r >= best.0 { Some(t) } else { best.1 });
        }
    }
    best
}

/// States whose adjoint carries a terminal event term at `T`.
fn terminal_event_states(sys: &LagrangeSystem) -> Vec<bool> {
    let p = &sys.problem;
    p.states
        .iter()
        .map(|s| {
            sys.terms
                .iter()
                .any(|t| t.support == Support::Event(p.horizon) && t.expr.depends_on(&s.name))
        })
        .collect()
}

/// Nodal `ψ` of each state's differential constraint.
fn adjoints(sys: &LagrangeSystem, cand: &SolutionCandidate) -> Vec<(usize, Vec<f64>)> {
    sys.problem
        .constraints
        .iter()
        .enumerate()
        .filter_map(|(j, c)| match (c, &cand.multipliers[j]) {
            (ConstraintSpec::Ode { state, .. }, Multiplier::Adjoint(v)) => Some((*state, v.clone())),
            _ => None,
        })
        .collect()
}

/// `∂R/∂y = 0` for every stationarity variable `y` (states and
/// second-group controls) at interval midpoints, with `ψ̇` from nodal
/// differences; plus the adjoint jumps at event times.
pub fn check_stationarity(sys: &LagrangeSystem, cand: &SolutionCandidate, cfg: &VerifyConfig) -> Option<CheckEntry> {
    let p = &sys.problem;
    let mut vars: Vec<usize> = (0..p.n_states()).map(|s| p.slot_state(s)).collect();
    for (d, c) in p.controls.iter().enumerate() {
        if sys.classification.group(&c.name) == Some(&Group::Second) {
            vars.push(p.slot_control(d));
        }
    }
    if vars.is_empty() {
        return None;
    }
    let cand = &normalized_candidate(cand);
    let mv = MultiplierView::new(cand);
    let mesh = &cand.mesh;
    let n = mesh.intervals();
    let skip = event_intervals(sys, cand);
    let interior: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .filter(|i| !skip.contains(i))
        .map(|i| {
            let mut slots = sys.new_slots();
            let (xm, zm) = midpoint_state(cand, i);
            let t = mesh.midpoint(i);
            sys.load(&mut slots, t, &xm, &zm, &cand.params);
            let w = mv.term_weights(sys, At::Mid(i));
            let atoms = &cand.control.intervals[i];
            sys.set_controls(&mut slots, &cand.control.mean(i));
            let r = vars
                .iter()
                .map(|&v| sys.grad_interval(v, &mut slots, &w, Some(&mv), Some(atoms)).abs())
                .fold(0.0, |m: f64, x| if x.is_nan() { f64::NAN } else { m.max(x) });
            (r, t)
        })
        .collect();

    let mut jumps = Vec::new();
    let adj = adjoints(sys, cand);
    let at_end = terminal_event_states(sys);
    let mut slots = sys.new_slots();
    for te in sys.event_times() {
        let k = mesh.snap(te);
        let w = mv.term_weights(sys, At::Node(k));
        sys.load(&mut slots, mesh.t(k), &cand.states[k], &cand.slacks[k], &cand.params);
        let atoms = &cand.control.intervals[k.min(n - 1)];
        sys.set_controls(&mut slots, &cand.control.mean(k.min(n - 1)));
        for (s, psi) in &adj {
            let e = sys.grad_event(te, p.slot_state(*s), &mut slots, &w, Some(atoms));
            let r = if k == n {
                if !at_end[*s] {
                    continue;
                }
                (psi[n] - e).abs()
            } else if k == 0 {
                continue;
            } else {
                let left = if k >= 2 { 2.0 * psi[k - 1] - psi[k - 2] } else { psi[k - 1] };
                let right = if k + 2 <= n { 2.0 * psi[k + 1] - psi[k + 2] } else { psi[k + 1] };
                (left - right - e).abs()
            };
            jumps.push((r, te));
        }
    }
    let (residual, at) = worst_of(interior.into_iter().chain(jumps));
    Some(CheckEntry::new("stationarity", residual, at, cfg.stationarity_tol))
}

/// No admissible parameter variation increases `S`.
pub fn check_params(sys: &LagrangeSystem, cand: &SolutionCandidate, cfg: &VerifyConfig) -> Option<CheckEntry> {
    let p = &sys.problem;
    if p.params.is_empty() {
        return None;
    }
    let cand = &normalized_candidate(cand);
    let grad = sys.param_gradient(cand, &MultiplierView::new(cand));
    let mut residual = 0.0f64;
    for (ip, g) in grad.iter().enumerate() {
        let a = cand.params[ip];
        let (lo, hi) = p.params[ip].bounds.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        let edge = 1e-9 * (1.0 + a.abs());
        let mut r = 0.0f64;
        if a < hi - edge {
            r = r.max(*g);
        }
        if a > lo + edge {
            r = r.max(-g);
        }
        residual = if g.is_nan() { f64::NAN } else { residual.max(r) };
    }
    Some(CheckEntry::new("parameters", residual, None, cfg.param_tol))
}

/// `λ ≥ 0` and `λ·z = 0` for an inequality with slack `z`.
fn slackness_residual(cand: &SolutionCandidate, j: usize, slack: usize) -> (f64, Option<f64>) {
    let Some(lam) = cand.multipliers[j].nodal() else { return (f64::NAN, None) };
    worst_of(lam.iter().enumerate().map(|(k, l)| {
        let z = cand.slacks[k][slack];
        ((l * z).abs().max(-l), cand.mesh.t(k))
    }))
}

fn maximin_constraint(sys: &LagrangeSystem) -> Option<usize> {
    sys.problem.criterion.maximin().map(|(_, _, j)| j)
}

/// Complementary slackness of the inequality constraints (the maximin
/// constraint is checked with its own identity).
pub fn check_slackness(sys: &LagrangeSystem, cand: &SolutionCandidate, cfg: &VerifyConfig) -> Option<CheckEntry> {
    let skip = maximin_constraint(sys);
    let items: Vec<(f64, Option<f64>)> = sys
        .problem
        .constraints
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .filter_map(|(j, c)| match c {
            ConstraintSpec::Inequality { slack, .. } => Some(slackness_residual(cand, j, *slack)),
            _ => None,
        })
        .collect();
    if items.is_empty() {
        return None;
    }
    let (residual, at) = worst_of(items.into_iter().map(|(r, t)| (r, t.unwrap_or(0.0))));
    Some(CheckEntry::new("slackness", residual, at, cfg.integral_tol))
}

/// `∫λ dt = λ0` for the maximin multiplier, with its slackness.
pub fn check_maximin(sys: &LagrangeSystem, cand: &SolutionCandidate, cfg: &VerifyConfig) -> Option<CheckEntry> {
    let j = maximin_constraint(sys)?;
    let ConstraintSpec::Inequality { slack, .. } = sys.problem.constraints[j] else { return None };
    let lam = cand.multipliers[j].nodal().unwrap_or(&[]);
    let integral: f64 = cand.mesh.weights().iter().zip(lam).map(|(w, l)| w * l).sum();
    let identity = (integral - cand.lambda0).abs();
    let (slack_r, at) = slackness_residual(cand, j, slack);
    let residual = if identity.is_nan() || slack_r.is_nan() { f64::NAN } else { identity.max(slack_r) };
    let at = if slack_r > identity { at } else { None };
    Some(CheckEntry::new("maximin", residual, at, cfg.integral_tol))
}

/// `λ0` and the multipliers do not vanish together.
pub fn check_nontriviality(_sys: &LagrangeSystem, cand: &SolutionCandidate, cfg: &VerifyConfig) -> Option<CheckEntry> {
    let size = cand.multipliers.iter().map(Multiplier::max_abs).fold(cand.lambda0.abs(), f64::max);
    Some(CheckEntry {
        name: "nontriviality",
        residual: size,
        at: None,
        tol: cfg.nontrivial_tol,
        pass: size > cfg.nontrivial_tol,
    })
}

/// Atom weights are nonnegative and sum to one on every interval.
pub fn check_weights(_sys: &LagrangeSystem, cand: &SolutionCandidate, cfg: &VerifyConfig) -> Option<CheckEntry> {
    let (sum_err, neg) = cand.control.weight_defects();
    Some(CheckEntry::new("weights", sum_err.max(neg), None, cfg.weight_tol))
}

/// At most `m + 1` active atoms per interval.
pub fn check_support(sys: &LagrangeSystem, cand: &SolutionCandidate, _cfg: &VerifyConfig) -> Option<CheckEntry> {
    let bound = extend(sys).slots.max(1);
    let excess = cand.control.max_support().saturating_sub(bound);
    Some(CheckEntry::new("support", excess as f64, None, 0.0))
}

/// Multipliers vanish past `T`: adjoints without a terminal event term
/// must reach zero at the horizon.
pub fn check_outside_zero(sys: &LagrangeSystem, cand: &SolutionCandidate, cfg: &VerifyConfig) -> Option<CheckEntry> {
    let at_end = terminal_event_states(sys);
    let free: Vec<f64> = adjoints(sys, cand)
        .into_iter()
        .filter(|(s, _)| !at_end[*s])
        .map(|(_, psi)| psi.last().copied().unwrap_or(0.0).abs())
        .collect();
    if free.is_empty() {
        return None;
    }
    let residual = free.into_iter().fold(0.0, |m: f64, x| if x.is_nan() { f64::NAN } else { m.max(x) });
    Some(CheckEntry::new("outside_zero", residual, Some(cand.mesh.horizon()), cfg.stationarity_tol))
}

type Check = fn(&LagrangeSystem, &SolutionCandidate, &VerifyConfig) -> Option<CheckEntry>;

const CHECKS: [Check; 9] = [
    check_hmax,
    check_stationarity,
    check_params,
    check_slackness,
    check_maximin,
    check_nontriviality,
    check_weights,
    check_support,
    check_outside_zero,
];

/// Runs every applicable check.
pub fn report(sys: &LagrangeSystem, cand: &SolutionCandidate, cfg: &VerifyConfig) -> VerificationReport {
    let mut entries: Vec<CheckEntry> = CHECKS.par_iter().filter_map(|c| c(sys, cand, cfg)).collect();
    entries.sort_by_key(|e| e.name);
    let nontrivial = entries.iter().find(|e| e.name == "nontriviality").is_some_and(|e| e.pass);
    VerificationReport {
        verdict: entries.iter().all(|e| e.pass),
        nontrivial,
        entries,
    }
}

/// Canned ways of spoiling a verified candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Perturbation {
    /// Shift one control by 0.1 on a single interval.
    ControlBump,
    /// Double every multiplier except `λ0` and the maximin multiplier.
    AdjointScaling,
    /// Zero `λ0` and every multiplier.
    ZeroMultipliers,
    /// Open a 0.2 slack where the inequality multiplier is largest.
    SlacknessViolation,
    /// Scale one atom weight by 1.2.
    WeightSum,
}

impl Perturbation {
    pub const ALL: [Perturbation; 5] = [
        Perturbation::ControlBump,
        Perturbation::AdjointScaling,
        Perturbation::ZeroMultipliers,
        Perturbation::SlacknessViolation,
        Perturbation::WeightSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Perturbation::ControlBump => "control_bump",
            Perturbation::AdjointScaling => "adjoint_scaling",
            Perturbation::ZeroMultipliers => "zero_multipliers",
            Perturbation::SlacknessViolation => "slackness_violation",
            Perturbation::WeightSum => "weight_sum",
        }
    }

    /// Checks this perturbation is meant to break, restricted to the
    /// checks that apply to the problem.
    pub fn intended(self, sys: &LagrangeSystem, applicable: &BTreeSet<&'static str>) -> BTreeSet<&'static str> {
        let targets: &[&'static str] = match self {
            Perturbation::ControlBump => &["h_max"],
            Perturbation::AdjointScaling => &["h_max", "stationarity"],
            Perturbation::ZeroMultipliers => &["nontriviality"],
            Perturbation::SlacknessViolation => {
                if slackness_target(sys).is_some_and(|(j, _)| Some(j) == maximin_constraint(sys)) {
                    &["maximin"]
                } else {
                    &["slackness"]
                }
            }
            Perturbation::WeightSum => &["weights"],
        };
        targets.iter().copied().filter(|t| applicable.contains(t)).collect()
    }

    /// The spoiled candidate, or `None` when the perturbation has nothing
    /// to act on (or would leave the candidate unchanged).
    pub fn apply(self, sys: &LagrangeSystem, cand: &SolutionCandidate) -> Option<SolutionCandidate> {
        let p = &sys.problem;
        let mut out = cand.clone();
        let n = cand.mesh.intervals();
        let skip = event_intervals(sys, cand);
        let target = (n / 2..n).chain(0..n / 2).find(|i| !skip.contains(i))?;
        match self {
            Perturbation::ControlBump => {
                let d = p.controls.iter().position(|c| is_first(sys, &c.name))?;
                let atom = out.control.intervals[target]
                    .iter_mut()
                    .max_by(|a, b| a.gamma.total_cmp(&b.gamma))?;
                let v = atom.u[d];
                atom.u[d] = match p.controls[d].set {
                    ControlSet::Box { hi, .. } if v + 0.1 > hi => v - 0.1,
                    _ => v + 0.1,
                };
            }
            Perturbation::AdjointScaling => {
                let keep = maximin_constraint(sys);
                let mut moved = 0.0f64;
                for (j, m) in out.multipliers.iter_mut().enumerate() {
                    if Some(j) != keep {
                        moved = moved.max(m.max_abs());
                        m.scale(2.0);
                    }
                }
                if moved <= 1e-12 {
                    return None;
                }
            }
            Perturbation::ZeroMultipliers => {
                out.lambda0 = 0.0;
                out.multipliers.iter_mut().for_each(|m| m.scale(0.0));
            }
            Perturbation::SlacknessViolation => {
                let (j, slack) = slackness_target(sys)?;
                let lam = cand.multipliers[j].nodal()?;
                let (k, l) = lam.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
                if *l <= 1e-9 {
                    return None;
                }
                out.slacks[k][slack] += 0.2;
            }
            Perturbation::WeightSum => {
                out.control.intervals[target].first_mut()?.gamma *= 1.2;
            }
        }
        Some(out)
    }
}

/// Inequality used by the slackness perturbation: the first ordinary one,
/// else the maximin constraint.
fn slackness_target(sys: &LagrangeSystem) -> Option<(usize, usize)> {
    let mm = maximin_constraint(sys);
    let ineqs: Vec<(usize, usize)> = sys
        .problem
        .constraints
        .iter()
        .enumerate()
        .filter_map(|(j, c)| match c {
            ConstraintSpec::Inequality { slack, .. } => Some((j, *slack)),
            _ => None,
        })
        .collect();
    ineqs.iter().find(|(j, _)| Some(*j) != mm).or(ineqs.first()).copied()
}
