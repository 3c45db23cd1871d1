//! Problems in canonical form: one criterion integral (with optional point
//! events) maximized subject to τ-indexed integral constraints
//! `J_j(τ) = ∫ [f_j1(t, τ) + f_j2(t) δ(t − τ)] dt = 0`.
//!
//! Standard constraint kinds are rewritten into that form with
//! [`CanonicalProblem::to_canonical`], using the Heaviside step `h(τ − t)`
//! with the left-closed convention `h(0) = 1`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate::SolutionCandidate;
use crate::expr::{self, BoundExpr, Expr, ExprError, Layout};
use crate::format::{self, ConstraintDecl, ControlSetDecl, CriterionDecl, FormatError, ProblemFile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("{0}")]
    Expr(#[from] ExprError),
}

fn invalid(line: usize, message: impl Into<String>) -> ProblemError {
    ProblemError::Invalid {
        line,
        message: message.into(),
    }
}

/// Names with a fixed meaning inside expressions.
pub const TIME: &str = "t";
pub const TAU: &str = "tau";
pub const LAG: &str = "s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDecl {
    pub name: String,
    pub init: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlSet {
    Box { lo: f64, hi: f64 },
    Finite(Vec<f64>),
}

impl ControlSet {
    pub fn contains(&self, v: f64, tol: f64) -> bool {
        match self {
            ControlSet::Box { lo, hi } => v >= lo - tol && v <= hi + tol,
            ControlSet::Finite(vals) => vals.iter().any(|x| (x - v).abs() <= tol),
        }
    }

    pub fn project(&self, v: f64) -> f64 {
        match self {
            ControlSet::Box { lo, hi } => v.clamp(*lo, *hi),
            ControlSet::Finite(vals) => *vals
                .iter()
                .min_by(|a, b| (*a - v).abs().total_cmp(&(*b - v).abs()))
                .expect("finite control sets are nonempty"),
        }
    }

    /// The admissible value closest to zero; the default starting guess.
    pub fn neutral(&self) -> f64 {
        self.project(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecl {
    pub name: String,
    pub set: ControlSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    pub bounds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CriterionPart {
    /// `∫ f0 dt`
    Integral(Expr),
    /// `F0` evaluated at `at`
    Terminal { expr: Expr, at: f64 },
    /// `min_t f0`, rewritten as `a → max` with `f0 − a ≥ 0`; `param` is the
    /// auto-parameter `a` and `constraint` the generated inequality.
    Maximin {
        expr: Expr,
        param: usize,
        constraint: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionSpec {
    pub parts: Vec<CriterionPart>,
}

impl CriterionSpec {
    pub fn maximin(&self) -> Option<(&Expr, usize, usize)> {
        self.parts.iter().find_map(|p| match p {
            CriterionPart::Maximin { expr, param, constraint } => Some((expr, *param, *constraint)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    IntegralEq,
    PointwiseEq,
    TerminalEq,
    Ode,
    Volterra,
    Fredholm,
    Convolution,
    Inequality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConstraintSpec {
    /// `∫ f dt = 0`
    IntegralEq { f: Expr },
    /// `f(t) = 0` for every t
    PointwiseEq { f: Expr },
    /// `F(y(at)) = 0`
    TerminalEq { f: Expr, at: f64 },
    /// `ẋ = rhs`, `x(0) = x0`
    Ode { state: usize, rhs: Expr },
    /// `x(t) = x0 + ∫_0^t f dτ`
    Volterra { state: usize, integrand: Expr },
    /// `x(t) = ∫_0^T f(x(τ), u(τ), τ, t) dτ`; in the integrand `t` is the
    /// outer time and `tau` the integration variable.
    Fredholm { state: usize, integrand: Expr },
    /// `x(t) = ∫_0^t u(τ) k(t − τ) dτ`; the kernel is written in `s`.
    Convolution {
        state: usize,
        control: usize,
        kernel: Expr,
    },
    /// `f ≥ 0`, stored as `f − z = 0` with slack `z ≥ 0`.
    Inequality { f: Expr, slack: usize },
}

impl ConstraintSpec {
    pub fn kind(&self) -> ConstraintKind {
        match self {
            ConstraintSpec::IntegralEq { .. } => ConstraintKind::IntegralEq,
            ConstraintSpec::PointwiseEq { .. } => ConstraintKind::PointwiseEq,
            ConstraintSpec::TerminalEq { .. } => ConstraintKind::TerminalEq,
            ConstraintSpec::Ode { .. } => ConstraintKind::Ode,
            ConstraintSpec::Volterra { .. } => ConstraintKind::Volterra,
            ConstraintSpec::Fredholm { .. } => ConstraintKind::Fredholm,
            ConstraintSpec::Convolution { .. } => ConstraintKind::Convolution,
            ConstraintSpec::Inequality { .. } => ConstraintKind::Inequality,
        }
    }

    pub fn bound_state(&self) -> Option<usize> {
        match self {
            ConstraintSpec::Ode { state, .. }
            | ConstraintSpec::Volterra { state, .. }
            | ConstraintSpec::Fredholm { state, .. }
            | ConstraintSpec::Convolution { state, .. } => Some(*state),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalProblem {
    pub horizon: f64,
    pub states: Vec<StateDecl>,
    pub controls: Vec<ControlDecl>,
    pub params: Vec<ParamDecl>,
    pub slacks: Vec<String>,
    pub criterion: CriterionSpec,
    pub constraints: Vec<ConstraintSpec>,
}

/// One constraint rewritten as `J(τ) = ∫ [running + step·h(τ − t)] dt + point`,
/// where `point` is evaluated at `t = τ` (or at `event` when set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalIntegrand {
    pub running: Expr,
    pub step: Expr,
    pub point: Expr,
    pub event: Option<f64>,
    /// False when `J` does not depend on τ (a single scalar condition).
    pub indexed: bool,
}

impl CanonicalIntegrand {
    /// `f_j1` with the step written out as `h(tau - t)`.
    pub fn f1_string(&self) -> String {
        let mut parts: Vec<(bool, String)> = Vec::new();
        if !self.step.is_zero() {
            parts.push(signed(&self.step, "*h(tau - t)"));
        }
        if !self.running.is_zero() || parts.is_empty() {
            parts.push(signed(&self.running, ""));
        }
        join_signed(&parts)
    }

    /// `f_j2` followed by the point-mass it multiplies.
    pub fn f2_string(&self) -> String {
        if self.point.is_zero() {
            return "0".into();
        }
        match self.event {
            Some(at) => format!("{} at t = {}", self.point, crate::report::fmt_num(at)),
            None => format!("{} at t = tau", self.point),
        }
    }
}

fn signed(e: &Expr, suffix: &str) -> (bool, String) {
    let (negative, body) = match e {
        Expr::Neg(inner) => (true, inner.as_ref().clone()),
        Expr::Const(c) if *c < 0.0 => (true, Expr::Const(-c)),
        other => (false, other.clone()),
    };
    let text = if suffix.is_empty() {
        body.to_string()
    } else if matches!(body, Expr::Add(..) | Expr::Sub(..)) {
        format!("({}){}", body, suffix)
    } else {
        format!("{}{}", body, suffix)
    };
    (negative, text)
}

pub(crate) fn join_signed(parts: &[(bool, String)]) -> String {
    let mut out = String::new();
    for (i, (negative, text)) in parts.iter().enumerate() {
        match (i, negative) {
            (0, true) => out.push('-'),
            (0, false) => {}
            (_, true) => out.push_str(" - "),
            (_, false) => out.push_str(" + "),
        }
        out.push_str(text);
    }
    if out.is_empty() {
        out.push('0');
    }
    out
}

/// Criterion as `∫ running dt + Σ events`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalObjective {
    pub running: Expr,
    pub events: Vec<(Expr, f64)>,
}

pub fn build_problem(file: &ProblemFile) -> Result<CanonicalProblem, ProblemError> {
    let horizon = file
        .horizon
        .as_ref()
        .ok_or_else(|| invalid(1, "missing `horizon`"))?
        .item;
    let mut names: HashSet<String> = [TIME, TAU, LAG].iter().map(|s| s.to_string()).collect();
    let mut claim = |name: &str, line: usize| -> Result<(), ProblemError> {
        if !names.insert(name.to_string()) {
            return Err(invalid(line, format!("name `{}` is reserved or already declared", name)));
        }
        Ok(())
    };

    let mut states = Vec::new();
    for d in &file.states {
        claim(&d.item.0, d.line)?;
        states.push(StateDecl {
            name: d.item.0.clone(),
            init: d.item.1,
        });
    }
    let mut controls = Vec::new();
    for d in &file.controls {
        claim(&d.item.0, d.line)?;
        let set = match &d.item.1 {
            ControlSetDecl::Box { lo, hi } => ControlSet::Box { lo: *lo, hi: *hi },
            ControlSetDecl::Set(v) => ControlSet::Finite(v.clone()),
        };
        controls.push(ControlDecl {
            name: d.item.0.clone(),
            set,
        });
    }
    let mut params = Vec::new();
    for d in &file.params {
        claim(&d.item.0, d.line)?;
        params.push(ParamDecl {
            name: d.item.0.clone(),
            bounds: d.item.1,
        });
    }

    let state_index = |name: &str, line: usize| -> Result<usize, ProblemError> {
        states
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| invalid(line, format!("undeclared state `{}`", name)))
    };
    let control_index = |name: &str, line: usize| -> Result<usize, ProblemError> {
        controls
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| invalid(line, format!("undeclared control `{}`", name)))
    };

    let mut slacks: Vec<String> = Vec::new();
    let fresh = |base: String, names: &HashSet<String>, taken: &[String]| -> String {
        let mut name = base;
        while names.contains(&name) || taken.contains(&name) {
            name.push('_');
        }
        name
    };

    let mut constraints = Vec::new();
    let mut bound_states: Vec<Option<usize>> = vec![None; states.len()];
    for (j, d) in file.constraints.iter().enumerate() {
        let line = d.line;
        let mut bind_state = |state: &str| -> Result<usize, ProblemError> {
            let i = state_index(state, line)?;
            if let Some(prev) = bound_states[i] {
                return Err(invalid(
                    line,
                    format!("state `{}` is already bound by constraint {}", state, prev + 1),
                ));
            }
            bound_states[i] = Some(j);
            Ok(i)
        };
        let spec = match &d.item {
            ConstraintDecl::Ode { state, rhs } => {
                let s = bind_state(state)?;
                if states[s].init.is_none() {
                    return Err(invalid(line, format!("state `{}` needs an `init` value for an ode constraint", state)));
                }
                ConstraintSpec::Ode { state: s, rhs: rhs.clone() }
            }
            ConstraintDecl::Volterra { state, integrand } => {
                let s = bind_state(state)?;
                if states[s].init.is_none() {
                    return Err(invalid(line, format!("state `{}` needs an `init` value for a volterra constraint", state)));
                }
                ConstraintSpec::Volterra { state: s, integrand: integrand.clone() }
            }
            ConstraintDecl::Fredholm { state, integrand } => ConstraintSpec::Fredholm {
                state: bind_state(state)?,
                integrand: integrand.clone(),
            },
            ConstraintDecl::Convolution { state, control, kernel } => ConstraintSpec::Convolution {
                state: bind_state(state)?,
                control: control_index(control, line)?,
                kernel: kernel.clone(),
            },
            ConstraintDecl::Integral(f) => ConstraintSpec::IntegralEq { f: f.clone() },
            ConstraintDecl::Pointwise(f) => ConstraintSpec::PointwiseEq { f: f.clone() },
            ConstraintDecl::Terminal { expr, at } => {
                check_time(*at, horizon, line)?;
                ConstraintSpec::TerminalEq { f: expr.clone(), at: *at }
            }
            ConstraintDecl::Inequality(f) => {
                let name = fresh(format!("z{}", j + 1), &names, &slacks);
                slacks.push(name);
                ConstraintSpec::Inequality {
                    f: f.clone(),
                    slack: slacks.len() - 1,
                }
            }
        };
        constraints.push(spec);
    }

    let mut parts = Vec::new();
    let mut seen_integral = false;
    for d in &file.criteria {
        match &d.item {
            CriterionDecl::Integral(e) => {
                if seen_integral {
                    return Err(invalid(d.line, "at most one `criterion integral` line"));
                }
                seen_integral = true;
                parts.push(CriterionPart::Integral(e.clone()));
            }
            CriterionDecl::Terminal { expr, at } => {
                check_time(*at, horizon, d.line)?;
                parts.push(CriterionPart::Terminal { expr: expr.clone(), at: *at });
            }
            CriterionDecl::Maximin(e) => {
                if file.criteria.len() > 1 {
                    return Err(invalid(d.line, "a maximin criterion cannot be combined with other criterion lines"));
                }
                let a = fresh("a".to_string(), &names, &[]);
                params.push(ParamDecl { name: a.clone(), bounds: None });
                let z = fresh("z_maximin".to_string(), &names, &slacks);
                slacks.push(z);
                constraints.push(ConstraintSpec::Inequality {
                    f: expr::sub(e.clone(), Expr::Var(a)),
                    slack: slacks.len() - 1,
                });
                parts.push(CriterionPart::Maximin {
                    expr: e.clone(),
                    param: params.len() - 1,
                    constraint: constraints.len() - 1,
                });
            }
        }
    }
    if parts.is_empty() {
        return Err(invalid(1, "missing `criterion`"));
    }

    let problem = CanonicalProblem {
        horizon,
        states,
        controls,
        params,
        slacks,
        criterion: CriterionSpec { parts },
        constraints,
    };
    problem.check_variables(file)?;
    Ok(problem)
}

fn check_time(at: f64, horizon: f64, line: usize) -> Result<(), ProblemError> {
    if !(0.0..=horizon).contains(&at) {
        return Err(invalid(line, format!("event time {} lies outside [0, {}]", at, horizon)));
    }
    Ok(())
}

/// Reads and validates a problem file.
pub fn load_problem(text: &str) -> Result<CanonicalProblem, ProblemError> {
    build_problem(&format::parse_problem(text)?)
}

impl CanonicalProblem {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }
    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }
    pub fn n_params(&self) -> usize {
        self.params.len()
    }
    pub fn n_slacks(&self) -> usize {
        self.slacks.len()
    }

    /// Slot order used by every bound expression: `t, tau, states, controls,
    /// params, slacks`.
    pub fn layout(&self) -> Layout {
        let mut names: Vec<String> = vec![TIME.into(), TAU.into()];
        names.extend(self.states.iter().map(|s| s.name.clone()));
        names.extend(self.controls.iter().map(|c| c.name.clone()));
        names.extend(self.params.iter().map(|p| p.name.clone()));
        names.extend(self.slacks.iter().cloned());
        Layout::new(names)
    }

    pub fn slot_state(&self, i: usize) -> usize {
        2 + i
    }
    pub fn slot_control(&self, i: usize) -> usize {
        2 + self.n_states() + i
    }
    pub fn slot_param(&self, i: usize) -> usize {
        2 + self.n_states() + self.n_controls() + i
    }
    pub fn slot_slack(&self, i: usize) -> usize {
        2 + self.n_states() + self.n_controls() + self.n_params() + i
    }

    pub fn control_names(&self) -> impl Iterator<Item = &str> {
        self.controls.iter().map(|c| c.name.as_str())
    }

    fn check_variables(&self, file: &ProblemFile) -> Result<(), ProblemError> {
        let mut base: Vec<&str> = vec![TIME];
        base.extend(self.states.iter().map(|s| s.name.as_str()));
        base.extend(self.control_names());
        base.extend(self.params.iter().map(|p| p.name.as_str()));
        let check = |e: &Expr, extra: &[&str], line: usize| -> Result<(), ProblemError> {
            for v in e.variables() {
                if !base.contains(&v.as_str()) && !extra.contains(&v.as_str()) {
                    return Err(invalid(line, format!("undeclared variable `{}`", v)));
                }
            }
            Ok(())
        };
        for (d, part) in file.criteria.iter().zip(&self.criterion.parts) {
            let e = match part {
                CriterionPart::Integral(e) => e,
                CriterionPart::Terminal { expr, .. } => expr,
                CriterionPart::Maximin { expr, .. } => expr,
            };
            check(e, &[], d.line)?;
        }
        for (d, c) in file.constraints.iter().zip(&self.constraints) {
            match c {
                ConstraintSpec::Fredholm { integrand, .. } => check(integrand, &[TAU], d.line)?,
                ConstraintSpec::Convolution { kernel, .. } => {
                    let params: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
                    for v in kernel.variables() {
                        if v != LAG && !params.contains(&v.as_str()) {
                            return Err(invalid(
                                d.line,
                                format!("kernel may only use `s` and parameters, found `{}`", v),
                            ));
                        }
                    }
                }
                ConstraintSpec::IntegralEq { f }
                | ConstraintSpec::PointwiseEq { f }
                | ConstraintSpec::TerminalEq { f, .. }
                | ConstraintSpec::Inequality { f, .. } => check(f, &[], d.line)?,
                ConstraintSpec::Ode { rhs, .. } => check(rhs, &[], d.line)?,
                ConstraintSpec::Volterra { integrand, .. } => check(integrand, &[], d.line)?,
            }
        }
        Ok(())
    }

    pub fn initial_value(&self, state: usize) -> f64 {
        self.states[state].init.unwrap_or(0.0)
    }

    /// Rewrites constraint `j` into canonical integrands.
    pub fn to_canonical(&self, j: usize) -> CanonicalIntegrand {
        let t = self.horizon;
        let state_var = |s: usize| Expr::Var(self.states[s].name.clone());
        let zero = || Expr::Const(0.0);
        match &self.constraints[j] {
            ConstraintSpec::IntegralEq { f } => CanonicalIntegrand {
                running: f.clone(),
                step: zero(),
                point: zero(),
                event: None,
                indexed: false,
            },
            ConstraintSpec::PointwiseEq { f } => CanonicalIntegrand {
                running: zero(),
                step: zero(),
                point: f.clone(),
                event: None,
                indexed: true,
            },
            ConstraintSpec::TerminalEq { f, at } => CanonicalIntegrand {
                running: zero(),
                step: zero(),
                point: f.clone(),
                event: Some(*at),
                indexed: false,
            },
            ConstraintSpec::Ode { state, rhs: f } | ConstraintSpec::Volterra { state, integrand: f } => {
                CanonicalIntegrand {
                    running: Expr::Const(-self.initial_value(*state) / t),
                    step: expr::neg(f.clone()),
                    point: state_var(*state),
                    event: None,
                    indexed: true,
                }
            }
            ConstraintSpec::Fredholm { state, integrand } => CanonicalIntegrand {
                running: integrand.rename(&[(TIME, TAU), (TAU, TIME)]),
                step: zero(),
                point: expr::neg(state_var(*state)),
                event: None,
                indexed: true,
            },
            ConstraintSpec::Convolution { state, control, kernel } => CanonicalIntegrand {
                running: zero(),
                step: expr::mul(
                    Expr::Var(self.controls[*control].name.clone()),
                    kernel.substitute(LAG, &expr::sub(expr::var(TAU), expr::var(TIME))),
                ),
                point: expr::neg(state_var(*state)),
                event: None,
                indexed: true,
            },
            ConstraintSpec::Inequality { f, slack } => CanonicalIntegrand {
                running: zero(),
                step: zero(),
                point: expr::sub(f.clone(), Expr::Var(self.slacks[*slack].clone())),
                event: None,
                indexed: true,
            },
        }
    }

    /// The criterion as an integral plus point events. A maximin criterion
    /// becomes `∫ a/T dt`.
    pub fn canonical_objective(&self) -> CanonicalObjective {
        let mut running = Expr::Const(0.0);
        let mut events = Vec::new();
        for part in &self.criterion.parts {
            match part {
                CriterionPart::Integral(e) => running = expr::add(running, e.clone()),
                CriterionPart::Terminal { expr, at } => events.push((expr.clone(), *at)),
                CriterionPart::Maximin { param, .. } => {
                    running = expr::add(
                        running,
                        expr::div(Expr::Var(self.params[*param].name.clone()), Expr::Const(self.horizon)),
                    )
                }
            }
        }
        CanonicalObjective { running, events }
    }

    /// Evaluates every constraint functional `J_j(τ_k)` at the mesh nodes of
    /// the candidate. Scalar conditions repeat their single value.
    pub fn eval_functionals(&self, cand: &SolutionCandidate) -> Result<Functionals, ProblemError> {
        let layout = self.layout();
        let ev = Sampler::new(self, cand);
        let n = cand.mesh.len();
        let mut values = Vec::with_capacity(self.constraints.len());
        for j in 0..self.constraints.len() {
            let ci = self.to_canonical(j);
            let running = ci.running.bind(&layout)?;
            let step = ci.step.bind(&layout)?;
            let point = ci.point.bind(&layout)?;
            let tau_running = ci.running.depends_on(TAU);
            let tau_step = ci.step.depends_on(TAU);
            let mut row = vec![0.0; n];
            let run_const = if tau_running { 0.0 } else { ev.integral(&running, 0.0) };
            let prefix = if tau_step { Vec::new() } else { ev.prefix_integral(&step, 0.0) };
            let event_node = ci.event.map(|at| cand.mesh.snap(at));
            for (k, slot) in row.iter_mut().enumerate() {
                let tau = cand.mesh.t(k);
                let r = if tau_running { ev.integral(&running, tau) } else { run_const };
                let s = if step.is_zero() {
                    0.0
                } else if tau_step {
                    ev.partial_integral(&step, tau, k)
                } else {
                    prefix[k]
                };
                let p = if point.is_zero() {
                    0.0
                } else {
                    ev.node_value(&point, event_node.unwrap_or(k), tau)
                };
                *slot = r + s + p;
            }
            if let Some(k) = row.iter().position(|v| v.is_nan()) {
                return Err(ProblemError::Invalid {
                    line: 0,
                    message: format!("constraint {} evaluates to NaN at node {}", j + 1, k),
                });
            }
            values.push(row);
        }
        Ok(Functionals {
            tau: cand.mesh.nodes().to_vec(),
            values,
        })
    }

    /// Criterion value of a candidate: the integral plus events, or for a
    /// maximin criterion the smallest nodal value of `f0`.
    pub fn criterion_value(&self, cand: &SolutionCandidate) -> Result<f64, ProblemError> {
        let layout = self.layout();
        let ev = Sampler::new(self, cand);
        if let Some((f0, _, _)) = self.criterion.maximin() {
            let b = f0.bind(&layout)?;
            let mut best = f64::INFINITY;
            for k in 0..cand.mesh.len() {
                best = best.min(ev.node_value(&b, k, 0.0));
            }
            return Ok(best);
        }
        let obj = self.canonical_objective();
        let mut total = ev.integral(&obj.running.bind(&layout)?, 0.0);
        for (e, at) in &obj.events {
            total += ev.node_value(&e.bind(&layout)?, cand.mesh.snap(*at), 0.0);
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Functionals {
    pub tau: Vec<f64>,
    /// `[constraint][node]`
    pub values: Vec<Vec<f64>>,
}

impl Functionals {
    pub fn max_abs(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| row.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau");
        for j in 0..self.values.len() {
            out.push_str(&format!(",J_{}", j + 1));
        }
        out.push('\n');
        for (k, tau) in self.tau.iter().enumerate() {
            out.push_str(&crate::report::fmt_num(*tau));
            for row in &self.values {
                out.push(',');
                out.push_str(&crate::report::fmt_num(row[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Mesh of strictly increasing nodes starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    nodes: Vec<f64>,
}

impl Mesh {
    pub fn uniform(intervals: usize, horizon: f64) -> Mesh {
        assert!(intervals >= 1 && horizon > 0.0);
        let h = horizon / intervals as f64;
        let mut nodes: Vec<f64> = (0..=intervals).map(|k| k as f64 * h).collect();
        nodes[intervals] = horizon;
        Mesh { nodes }
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Option<Mesh> {
        let ok = nodes.len() >= 2 && nodes[0] == 0.0 && nodes.windows(2).all(|w| w[1] > w[0]);
        ok.then_some(Mesh { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    #[inline]
    pub fn h(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        0.5 * (self.nodes[i] + self.nodes[i + 1])
    }

    /// Trapezoid weights of the nodes.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.intervals();
        let mut w = vec![0.0; n + 1];
        for i in 0..n {
            let h = self.h(i);
            w[i] += 0.5 * h;
            w[i + 1] += 0.5 * h;
        }
        w
    }

    /// Interval containing `t` (the last interval for `t = T`).
    pub fn locate(&self, t: f64) -> usize {
        match self.nodes.binary_search_by(|n| n.total_cmp(&t)) {
            Ok(k) => k.min(self.intervals() - 1),
            Err(k) => k.saturating_sub(1).min(self.intervals() - 1),
        }
    }

    /// Nearest node to `t`; warns when `t` is not a node.
    pub fn snap(&self, t: f64) -> usize {
        let i = self.locate(t);
        let k = if (t - self.nodes[i]).abs() <= (self.nodes[i + 1] - t).abs() { i } else { i + 1 };
        if (self.nodes[k] - t).abs() > 1e-12 * self.horizon().max(1.0) {
            log::warn!("event time {} snapped to mesh node {}", t, self.nodes[k]);
        }
        k
    }

    /// Linear interpolation of nodal values.
    pub fn interpolate(&self, values: &[f64], t: f64) -> f64 {
        let i = self.locate(t);
        let s = ((t - self.nodes[i]) / self.h(i)).clamp(0.0, 1.0);
        values[i] + s * (values[i + 1] - values[i])
    }

    /// Trapezoid integral of nodal values over `[t, T]`.
    pub fn tail_integral(&self, values: &[f64], t: f64) -> f64 {
        let i = self.locate(t);
        let vt = self.interpolate(values, t);
        let mut total = 0.5 * (self.nodes[i + 1] - t) * (vt + values[i + 1]);
        for k in i + 1..self.intervals() {
            total += 0.5 * self.h(k) * (values[k] + values[k + 1]);
        }
        total
    }
}

/// Evaluates bound integrands along a candidate. Controls are taken per
/// interval and averaged over the interval's atoms; the interval-trapezoid
/// rule uses both end nodes with the interval's controls.
pub(crate) struct Sampler<'a> {
    problem: &'a CanonicalProblem,
    cand: &'a SolutionCandidate,
    slots: std::cell::RefCell<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    pub(crate) fn new(problem: &'a CanonicalProblem, cand: &'a SolutionCandidate) -> Self {
        let mut slots = vec![0.0; problem.layout().len()];
        for (i, a) in cand.params.iter().enumerate() {
            slots[problem.slot_param(i)] = *a;
        }
        Sampler {
            problem,
            cand,
            slots: std::cell::RefCell::new(slots),
        }
    }

    /// `g` at node `n` with the controls of `interval`, averaged over atoms.
    pub(crate) fn value_at(&self, g: &BoundExpr, n: usize, interval: usize, tau: f64) -> f64 {
        let p = self.problem;
        let mut slots = self.slots.borrow_mut();
        slots[0] = self.cand.mesh.t(n);
        slots[1] = tau;
        for (i, x) in self.cand.states[n].iter().enumerate() {
            slots[p.slot_state(i)] = *x;
        }
        if let Some(z) = self.cand.slacks.get(n) {
            for (i, v) in z.iter().enumerate() {
                slots[p.slot_slack(i)] = *v;
            }
        }
        let mut total = 0.0;
        for atom in &self.cand.control.intervals[interval] {
            for (i, u) in atom.u.iter().enumerate() {
                slots[p.slot_control(i)] = *u;
            }
            total += atom.gamma * g.eval(&slots);
        }
        total
    }

    pub(crate) fn node_value(&self, g: &BoundExpr, n: usize, tau: f64) -> f64 {
        let interval = n.min(self.cand.mesh.intervals() - 1);
        self.value_at(g, n, interval, tau)
    }

    fn interval_trapezoid(&self, g: &BoundExpr, i: usize, tau: f64) -> f64 {
        0.5 * self.cand.mesh.h(i) * (self.value_at(g, i, i, tau) + self.value_at(g, i + 1, i, tau))
    }

    pub(crate) fn integral(&self, g: &BoundExpr, tau: f64) -> f64 {
        if g.is_zero() {
            return 0.0;
        }
        (0..self.cand.mesh.intervals())
            .map(|i| self.interval_trapezoid(g, i, tau))
            .sum()
    }

    /// `∫_0^{t_k} g dt` for every node k, for τ-free `g`.
    pub(crate) fn prefix_integral(&self, g: &BoundExpr, tau: f64) -> Vec<f64> {
        let n = self.cand.mesh.intervals();
        let mut out = vec![0.0; n + 1];
        if g.is_zero() {
            return out;
        }
        for i in 0..n {
            out[i + 1] = out[i] + self.interval_trapezoid(g, i, tau);
        }
        out
    }

    /// `∫_0^{t_k} g(t, τ) dt`.
    pub(crate) fn partial_integral(&self, g: &BoundExpr, tau: f64, k: usize) -> f64 {
        (0..k).map(|i| self.interval_trapezoid(g, i, tau)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidate::SolutionCandidate;
    use crate::relax::RelaxedControl;

    const LQ: &str = "horizon 1\nstate x init 1\ncontrol u box -1 1\ncriterion integral \"-(x^2+u^2)\"\nconstraint ode x \"u\"\n";

    fn candidate(problem: &CanonicalProblem, n: usize, x: impl Fn(f64) -> f64, u: f64) -> SolutionCandidate {
        let mesh = Mesh::uniform(n, problem.horizon);
        let states = mesh.nodes().iter().map(|&t| vec![x(t)]).collect();
        let control = RelaxedControl::classical(vec![vec![u]; n]);
        SolutionCandidate::new(problem, mesh, states, control)
    }

    #[test]
    fn builds_lq_problem() {
        let p = load_problem(LQ).unwrap();
        assert_eq!(p.constraints.len(), 1);
        assert_eq!(p.n_states(), 1);
        assert_eq!(p.horizon, 1.0);
    }

    #[test]
    fn inequality_gains_slack() {
        let p = load_problem("horizon 1\nstate x init 0\ncontrol u box -1 1\ncriterion integral \"u\"\nconstraint ode x \"u\"\nconstraint ineq \"x\"\n").unwrap();
        assert_eq!(p.slacks, vec!["z2".to_string()]);
        assert_eq!(p.to_canonical(1).point.to_string(), "x - z2");
    }

    #[test]
    fn validation_errors() {
        let undeclared = "horizon 1\nstate x init 0\ncontrol u box -1 1\ncriterion integral \"u\"\nconstraint ode y \"u\"\n";
        assert!(matches!(load_problem(undeclared), Err(ProblemError::Invalid { line: 5, .. })));
        let dup = "horizon 1\nstate x init 0\ncontrol u box -1 1\ncriterion integral \"u\"\nconstraint ode x \"u\"\nconstraint ode x \"-u\"\n";
        assert!(load_problem(dup).is_err());
        let no_init = "horizon 1\nstate x\ncontrol u box -1 1\ncriterion integral \"u\"\nconstraint ode x \"u\"\n";
        assert!(load_problem(no_init).is_err());
        let bad_var = "horizon 1\nstate x init 0\ncontrol u box -1 1\ncriterion integral \"w\"\n";
        assert!(load_problem(bad_var).is_err());
        let reserved = "horizon 1\nstate t init 0\ncriterion integral \"t\"\n";
        assert!(load_problem(reserved).is_err());
    }

    #[test]
    fn canonical_forms() {
        let p = load_problem(LQ).unwrap();
        let c = p.to_canonical(0);
        assert_eq!(c.f1_string(), "-u*h(tau - t) - 1");
        assert_eq!(c.point.to_string(), "x");
        let p = load_problem("horizon 1\nstate x init 0\ncontrol u box -1 1\ncriterion integral \"u\"\nconstraint integral \"x - 0.5\"\nconstraint terminal \"x^2\" at 1\n").unwrap();
        let c = p.to_canonical(0);
        assert_eq!((c.running.to_string(), c.point.is_zero(), c.indexed), ("x - 0.5".into(), true, false));
        let c = p.to_canonical(1);
        assert_eq!((c.running.is_zero(), c.point.to_string(), c.event), (true, "x^2".into(), Some(1.0)));
        assert_eq!(p.to_canonical(1), p.to_canonical(1));
    }

    #[test]
    fn ode_functional_exact_for_linear_state() {
        let p = load_problem("horizon 1\nstate x init 0\ncontrol u box -1 1\ncriterion integral \"-u^2\"\nconstraint ode x \"u\"\n").unwrap();
        for n in [1, 3, 10, 57] {
            let cand = candidate(&p, n, |t| t, 1.0);
            let j = p.eval_functionals(&cand).unwrap();
            assert!(j.max_abs()[0] <= 1e-10);
        }
        // x ≡ 0, u ≡ 1 gives J(τ) = −τ
        let cand = candidate(&p, 8, |_| 0.0, 1.0);
        let j = p.eval_functionals(&cand).unwrap();
        for (k, v) in j.values[0].iter().enumerate() {
            assert!((v + j.tau[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn integral_functional() {
        let p = load_problem("horizon 1\nstate x\ncontrol u box -1 1\ncriterion integral \"u\"\nconstraint integral \"x - 0.5\"\n").unwrap();
        let cand = candidate(&p, 10, |_| 0.5, 0.0);
        assert_eq!(p.eval_functionals(&cand).unwrap().max_abs()[0], 0.0);
    }

    #[test]
    fn mesh_helpers() {
        let m = Mesh::uniform(4, 2.0);
        assert_eq!(m.nodes(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(m.locate(2.0), 3);
        assert_eq!(m.locate(0.7), 1);
        assert_eq!(m.snap(0.74), 1);
        assert_eq!(m.snap(0.76), 2);
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert!((m.interpolate(&v, 1.25) - 2.5).abs() < 1e-15);
        assert!((m.tail_integral(&v, 1.0) - 3.0).abs() < 1e-14);
        assert!(Mesh::from_nodes(vec![0.0, 0.5, 0.5]).is_none());
    }
}
