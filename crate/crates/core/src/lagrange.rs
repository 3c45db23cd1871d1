//! Lagrange function of a canonical problem.
//!
//! Every criterion part and constraint contributes a few additive terms to
//! `R = λ0·R0 + Σ R_j`. Terms are either *running* (they may contain
//! controls that are maximized pointwise) or *point/state* terms (they
//! force stationarity in every variable they contain). The terms holding
//! first-group variables form the Hamiltonian `H`; the rest form `N`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{join_signed, CanonicalProblem, ConstraintKind, ConstraintSpec, CriterionPart, Mesh, TAU, TIME};
use crate::candidate::{Multiplier, SolutionCandidate};
use crate::expr::{self, BoundExpr, Expr, ExprError};
use crate::relax::Atom;
use crate::report::fmt_num;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LagrangeError {
    #[error("term from {source_name} is not differentiable in `{var}` ({func})")]
    Nonsmooth {
        source_name: String,
        var: String,
        func: &'static str,
    },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Criterion,
    Constraint(usize),
}

/// Running terms may hold controls that are maximized pointwise; point
/// terms make every variable they contain a stationarity variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermClass {
    Running,
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Support {
    /// Present at every t in [0, T].
    Interval,
    /// Multiplies `δ(t − t0)`.
    Event(f64),
    /// A constant offset; it never affects optimality conditions.
    Constant,
}

/// The multiplier object a term is weighted by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weight {
    Lambda0,
    /// `ψ_j(t)`
    Adjoint(usize),
    /// `ψ̇_j(t)`
    AdjointRate(usize),
    /// `ψ_j(0)`
    AdjointAtZero(usize),
    /// `λ_j(t)` or the scalar `λ_j`
    Multiplier(usize),
    /// `∫_t^T λ_j(τ) dτ`
    TailIntegral(usize),
    /// `∫_0^T λ_j(τ) dτ`
    TailAtZero(usize),
}

/// How a multiplier function enters a running term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    /// `weight(t) · expr`
    None,
    /// `∫_0^T λ_j(τ) · expr(t, τ) dτ`
    Full,
    /// `∫_t^T λ_j(τ) · expr(t, τ) dτ`
    Causal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RTerm {
    pub source: Source,
    pub class: TermClass,
    pub support: Support,
    pub weight: Weight,
    pub kernel: Kernel,
    /// Body multiplied by the weight, sign included.
    pub expr: Expr,
    /// Name of the weight in printed output.
    pub weight_symbol: String,
    /// Role-name form used for the schematic print: (negative, body).
    pub schematic: (bool, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Group {
    First,
    Second,
    /// First-group except at the listed event times.
    SecondAt(Vec<f64>),
    Parameter,
}

impl Group {
    pub fn is_first_somewhere(&self) -> bool {
        matches!(self, Group::First | Group::SecondAt(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    /// Declared unknowns in layout order with their group.
    pub entries: Vec<(String, Group)>,
}

impl Classification {
    pub fn group(&self, name: &str) -> Option<&Group> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn has_first_group(&self) -> bool {
        self.entries.iter().any(|(_, g)| g.is_first_somewhere())
    }
}

/// Adjoint equation of one differential constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointEquation {
    pub constraint: usize,
    pub state: usize,
    /// `ψ̇ = rhs`, in terms of weight symbols and problem variables.
    pub rhs: Expr,
    /// Kernel contributions to the rhs, printed only.
    pub kernel_terms: Vec<String>,
    /// `ψ(t0−) − ψ(t0+)` at each event time.
    pub jumps: Vec<(f64, Expr)>,
}

#[derive(Debug, Clone)]
struct BoundTerm {
    value: BoundExpr,
    /// Partial derivatives with respect to layout slots; `None` when the
    /// body is not differentiable in that slot.
    partials: BTreeMap<usize, Option<BoundExpr>>,
    uses_controls: bool,
}

#[derive(Debug, Clone)]
pub struct LagrangeSystem {
    pub problem: CanonicalProblem,
    pub terms: Vec<RTerm>,
    pub classification: Classification,
    /// Membership of each term in `H`.
    pub in_h: Vec<bool>,
    bound: Vec<BoundTerm>,
}

fn scalar_symbol(j: usize) -> String {
    format!("lambda_{}", j + 1)
}

fn function_symbol(j: usize) -> String {
    format!("lambda_{}(t)", j + 1)
}

/// Terms contributed by the criterion.
pub fn contribution_for_criterion(p: &CanonicalProblem) -> Vec<RTerm> {
    let mut out = Vec::new();
    let terminal_count = p
        .criterion
        .parts
        .iter()
        .filter(|c| matches!(c, CriterionPart::Terminal { .. }))
        .count();
    let mut terminal_seen = 0;
    for part in &p.criterion.parts {
        match part {
            CriterionPart::Integral(f0) => out.push(RTerm {
                source: Source::Criterion,
                class: TermClass::Running,
                support: Support::Interval,
                weight: Weight::Lambda0,
                kernel: Kernel::None,
                expr: f0.clone(),
                weight_symbol: "lambda0".into(),
                schematic: (false, "lambda0*f0".into()),
            }),
            CriterionPart::Terminal { expr, at } => {
                terminal_seen += 1;
                let name = if terminal_count > 1 { format!("F0_{}", terminal_seen) } else { "F0".into() };
                out.push(RTerm {
                    source: Source::Criterion,
                    class: TermClass::Point,
                    support: Support::Event(*at),
                    weight: Weight::Lambda0,
                    kernel: Kernel::None,
                    expr: expr.clone(),
                    weight_symbol: "lambda0".into(),
                    schematic: (false, format!("lambda0*{}*{}", name, delta(*at, p.horizon))),
                });
            }
            CriterionPart::Maximin { expr: f0, param, constraint } => {
                let a = Expr::Var(p.params[*param].name.clone());
                let base = |expr: Expr, weight: Weight, symbol: &str, schematic: (bool, String)| RTerm {
                    source: Source::Criterion,
                    class: TermClass::Point,
                    support: Support::Interval,
                    weight,
                    kernel: Kernel::None,
                    expr,
                    weight_symbol: symbol.into(),
                    schematic,
                };
                let a_name = &p.params[*param].name;
                out.push(base(
                    expr::div(a.clone(), Expr::Const(p.horizon)),
                    Weight::Lambda0,
                    "lambda0",
                    (false, format!("lambda0*{}/T", a_name)),
                ));
                out.push(base(
                    f0.clone(),
                    Weight::Multiplier(*constraint),
                    "lambda(t)",
                    (false, "lambda(t)*f0".into()),
                ));
                out.push(base(
                    expr::neg(a),
                    Weight::Multiplier(*constraint),
                    "lambda(t)",
                    (true, format!("lambda(t)*{}", a_name)),
                ));
            }
        }
    }
    out
}

fn delta(at: f64, horizon: f64) -> String {
    if at == horizon {
        "delta(t - tbar)".into()
    } else {
        format!("delta(t - {})", fmt_num(at))
    }
}

/// Terms contributed by constraint `j`. The implicit inequality of a
/// maximin criterion contributes nothing here; its terms belong to the
/// criterion.
pub fn contribution_for_constraint(p: &CanonicalProblem, j: usize) -> Vec<RTerm> {
    if p.criterion.maximin().is_some_and(|(_, _, c)| c == j) {
        return Vec::new();
    }
    let n = j + 1;
    let src = Source::Constraint(j);
    let term = |class, support, weight, kernel, expr: Expr, symbol: String, schematic: (bool, String)| RTerm {
        source: src,
        class,
        support,
        weight,
        kernel,
        expr,
        weight_symbol: symbol,
        schematic,
    };
    let state_name = |s: usize| p.states[s].name.clone();
    let state_var = |s: usize| Expr::Var(state_name(s));
    use Kernel as K;
    use Support as S;
    use TermClass as C;
    match &p.constraints[j] {
        ConstraintSpec::Ode { state, rhs } => vec![
            term(C::Running, S::Interval, Weight::Adjoint(j), K::None, rhs.clone(), format!("psi_{}", n), (false, format!("psi_{n}*f_{n}"))),
            term(C::Point, S::Interval, Weight::AdjointRate(j), K::None, state_var(*state), format!("dpsi_{}", n), (false, format!("dpsi_{n}*{}", state_name(*state)))),
            term(
                C::Point,
                S::Constant,
                Weight::AdjointAtZero(j),
                K::None,
                Expr::Const(p.initial_value(*state) / p.horizon),
                format!("psi_{}(0)", n),
                (false, format!("psi_{n}(0)*{}0/T", state_name(*state))),
            ),
        ],
        ConstraintSpec::Volterra { state, integrand } => vec![
            term(
                C::Running,
                S::Interval,
                Weight::TailIntegral(j),
                K::None,
                expr::neg(integrand.clone()),
                format!("int_t^T lambda_{}(tau) dtau", n),
                (true, format!("f_{n}*int_t^T lambda_{n}(tau) dtau")),
            ),
            term(C::Point, S::Interval, Weight::Multiplier(j), K::None, state_var(*state), function_symbol(j), (false, format!("lambda_{n}(t)*{}", state_name(*state)))),
            term(
                C::Point,
                S::Constant,
                Weight::TailAtZero(j),
                K::None,
                Expr::Const(-p.initial_value(*state) / p.horizon),
                format!("int_0^T lambda_{}(tau) dtau", n),
                (true, format!("int_0^T lambda_{n}(tau) dtau*{}0/T", state_name(*state))),
            ),
        ],
        ConstraintSpec::Fredholm { state, .. } => vec![
            term(
                C::Running,
                S::Interval,
                Weight::Multiplier(j),
                K::Full,
                p.to_canonical(j).running,
                format!("lambda_{}(tau)", n),
                (false, format!("int_0^T lambda_{n}(tau)*f_{n}(t,tau) dtau")),
            ),
            term(C::Point, S::Interval, Weight::Multiplier(j), K::None, expr::neg(state_var(*state)), function_symbol(j), (true, format!("lambda_{n}(t)*{}", state_name(*state)))),
        ],
        ConstraintSpec::Convolution { state, control, .. } => vec![
            term(
                C::Running,
                S::Interval,
                Weight::Multiplier(j),
                K::Causal,
                p.to_canonical(j).step,
                format!("lambda_{}(tau)", n),
                (false, format!("{}*int_t^T lambda_{n}(tau)*k_{n}(tau - t) dtau", p.controls[*control].name)),
            ),
            term(C::Point, S::Interval, Weight::Multiplier(j), K::None, expr::neg(state_var(*state)), function_symbol(j), (true, format!("lambda_{n}(t)*{}", state_name(*state)))),
        ],
        ConstraintSpec::IntegralEq { f } => vec![term(
            C::Running,
            S::Interval,
            Weight::Multiplier(j),
            K::None,
            f.clone(),
            scalar_symbol(j),
            (false, format!("lambda_{n}*f_{n}")),
        )],
        ConstraintSpec::PointwiseEq { f } => vec![term(
            C::Point,
            S::Interval,
            Weight::Multiplier(j),
            K::None,
            f.clone(),
            function_symbol(j),
            (false, format!("lambda_{n}(t)*f_{n}")),
        )],
        ConstraintSpec::TerminalEq { f, at } => vec![term(
            C::Point,
            S::Event(*at),
            Weight::Multiplier(j),
            K::None,
            f.clone(),
            scalar_symbol(j),
            (false, format!("lambda_{n}*F_{n}*{}", delta(*at, p.horizon))),
        )],
        ConstraintSpec::Inequality { f, slack } => {
            let z = &p.slacks[*slack];
            vec![
                term(C::Point, S::Interval, Weight::Multiplier(j), K::None, f.clone(), function_symbol(j), (false, format!("lambda_{n}(t)*f_{n}"))),
                term(
                    C::Point,
                    S::Interval,
                    Weight::Multiplier(j),
                    K::None,
                    expr::neg(Expr::Var(z.clone())),
                    function_symbol(j),
                    (true, format!("lambda_{n}(t)*{}", z)),
                ),
            ]
        }
    }
}

/// Classifies every declared unknown from the term list.
pub fn classify_variables(p: &CanonicalProblem, terms: &[RTerm]) -> Classification {
    let mut entries = Vec::new();
    for s in &p.states {
        entries.push((s.name.clone(), Group::Second));
    }
    for c in &p.controls {
        let mut everywhere = false;
        let mut events: Vec<f64> = Vec::new();
        for t in terms.iter().filter(|t| t.class == TermClass::Point && t.expr.depends_on(&c.name)) {
            match t.support {
                Support::Interval | Support::Constant => everywhere = true,
                Support::Event(at) => {
                    if !events.contains(&at) {
                        events.push(at);
                    }
                }
            }
        }
        let group = if everywhere {
            Group::Second
        } else if events.is_empty() {
            Group::First
        } else {
            events.sort_by(f64::total_cmp);
            Group::SecondAt(events)
        };
        entries.push((c.name.clone(), group));
    }
    for a in &p.params {
        entries.push((a.name.clone(), Group::Parameter));
    }
    for z in &p.slacks {
        entries.push((z.clone(), Group::Second));
    }
    Classification { entries }
}

impl LagrangeSystem {
    /// Assembles all contributions, classifies variables and splits `R`.
    pub fn assemble(problem: &CanonicalProblem) -> Result<LagrangeSystem, LagrangeError> {
        let mut terms = contribution_for_criterion(problem);
        for j in 0..problem.constraints.len() {
            terms.extend(contribution_for_constraint(problem, j));
        }
        let classification = classify_variables(problem, &terms);
        let first: Vec<&str> = classification
            .entries
            .iter()
            .filter(|(_, g)| g.is_first_somewhere())
            .map(|(n, _)| n.as_str())
            .collect();
        let in_h = terms
            .iter()
            .map(|t| t.class == TermClass::Running && t.expr.depends_on_any(first.iter().copied()))
            .collect();

        let layout = problem.layout();
        let controls: Vec<&str> = problem.control_names().collect();
        let mut bound = Vec::with_capacity(terms.len());
        for t in &terms {
            let mut partials = BTreeMap::new();
            for v in t.expr.variables() {
                if v == TIME || v == TAU {
                    continue;
                }
                let slot = layout.slot(&v).expect("validated variable");
                let d = match t.expr.diff(&v) {
                    Ok(d) => Some(d.bind(&layout)?),
                    Err(ExprError::Nonsmooth { func, .. }) => {
                        if !controls.contains(&v.as_str()) {
                            return Err(LagrangeError::Nonsmooth {
                                source_name: source_name(t.source),
                                var: v,
                                func,
                            });
                        }
                        None
                    }
                    Err(e) => return Err(e.into()),
                };
                partials.insert(slot, d);
            }
            bound.push(BoundTerm {
                value: t.expr.bind(&layout)?,
                partials,
                uses_controls: t.expr.depends_on_any(controls.iter().copied()),
            });
        }
        Ok(LagrangeSystem {
            problem: problem.clone(),
            terms,
            classification,
            in_h,
            bound,
        })
    }

    /// `R` in role names, in canonical order: interval terms in assembly
    /// order, then event terms. Constant offsets are left out.
    pub fn schematic(&self) -> String {
        schematic_of(&self.terms)
    }

    fn printed_order(&self) -> Vec<usize> {
        printed_order(&self.terms)
    }

    /// One term with its concrete body.
    pub fn concrete_term(&self, k: usize) -> (bool, String) {
        let t = &self.terms[k];
        let (negative, body) = match &t.expr {
            Expr::Neg(inner) => (true, inner.as_ref().clone()),
            Expr::Const(c) if *c < 0.0 => (true, Expr::Const(-c)),
            other => (false, other.clone()),
        };
        let body_text = if matches!(body, Expr::Add(..) | Expr::Sub(..)) {
            format!("({})", body)
        } else {
            body.to_string()
        };
        let text = match t.kernel {
            Kernel::None => format!("{}*{}", t.weight_symbol, body_text),
            Kernel::Full => format!("int_0^T {}*{} dtau", t.weight_symbol, body_text),
            Kernel::Causal => format!("int_t^T {}*{} dtau", t.weight_symbol, body_text),
        };
        let text = match t.support {
            Support::Event(at) => format!("{}*{}", text, delta(at, self.problem.horizon)),
            _ => text,
        };
        (negative, text)
    }

    fn concrete_sum(&self, pick: impl Fn(usize) -> bool) -> String {
        let parts: Vec<(bool, String)> = self
            .printed_order()
            .into_iter()
            .filter(|&k| pick(k))
            .map(|k| self.concrete_term(k))
            .collect();
        join_signed(&parts)
    }

    /// `R` with the problem's own expressions substituted.
    pub fn concrete(&self) -> String {
        self.concrete_sum(|_| true)
    }

    pub fn h_string(&self) -> String {
        self.concrete_sum(|k| self.in_h[k])
    }

    pub fn n_string(&self) -> String {
        self.concrete_sum(|k| !self.in_h[k])
    }

    /// Symbolic term `weight · body`, with the weight as a variable.
    fn symbolic_term(&self, k: usize) -> Expr {
        let t = &self.terms[k];
        expr::mul(Expr::Var(t.weight_symbol.clone()), t.expr.clone())
    }

    /// Symbolic sum of the selected terms (kernel integrands taken as is).
    pub fn symbolic_sum(&self, pick: impl Fn(usize) -> bool) -> Expr {
        (0..self.terms.len())
            .filter(|&k| pick(k))
            .fold(Expr::Const(0.0), |acc, k| expr::add(acc, self.symbolic_term(k)))
    }

    /// `(N, H)` as symbolic sums.
    pub fn split_nh(&self) -> (Expr, Expr) {
        (self.symbolic_sum(|k| !self.in_h[k]), self.symbolic_sum(|k| self.in_h[k]))
    }

    /// Number of constraints with a term in `H`.
    pub fn u_constraint_count(&self) -> usize {
        let mut js: Vec<usize> = self
            .terms
            .iter()
            .zip(&self.in_h)
            .filter(|(_, h)| **h)
            .filter_map(|(t, _)| match t.source {
                Source::Constraint(j) => Some(j),
                Source::Criterion => None,
            })
            .collect();
        js.dedup();
        js.len()
    }

    /// Adjoint equations of the differential constraints.
    pub fn adjoint_system(&self) -> Result<Vec<AdjointEquation>, LagrangeError> {
        let p = &self.problem;
        let mut out = Vec::new();
        for (j, c) in p.constraints.iter().enumerate() {
            let ConstraintSpec::Ode { state, .. } = c else { continue };
            let x = &p.states[*state].name;
            let mut rhs = Expr::Const(0.0);
            let mut kernel_terms = Vec::new();
            let mut jumps: Vec<(f64, Expr)> = Vec::new();
            for (k, t) in self.terms.iter().enumerate() {
                if !t.expr.depends_on(x) || matches!(t.weight, Weight::AdjointRate(_)) {
                    continue;
                }
                let d = self.symbolic_term(k).diff(x).map_err(|e| nonsmooth(e, t.source, x))?;
                match (t.support, t.kernel) {
                    (Support::Interval, Kernel::None) => rhs = expr::sub(rhs, d),
                    (Support::Interval, _) => kernel_terms.push(format!("-d/d{}[{}]", x, self.concrete_term(k).1)),
                    (Support::Event(at), _) => match jumps.iter_mut().find(|(t0, _)| *t0 == at) {
                        Some((_, e)) => *e = expr::add(e.clone(), d),
                        None => jumps.push((at, d)),
                    },
                    (Support::Constant, _) => {}
                }
            }
            jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
            out.push(AdjointEquation {
                constraint: j,
                state: *state,
                rhs,
                kernel_terms,
                jumps,
            });
        }
        Ok(out)
    }
}

fn printed_order(terms: &[RTerm]) -> Vec<usize> {
    let interval = (0..terms.len()).filter(|&k| terms[k].support == Support::Interval);
    let events = (0..terms.len()).filter(|&k| matches!(terms[k].support, Support::Event(_)));
    interval.chain(events).collect()
}

/// Role-name print of a term list in canonical order, without constant
/// offsets.
pub fn schematic_of(terms: &[RTerm]) -> String {
    let parts: Vec<(bool, String)> = printed_order(terms).into_iter().map(|k| terms[k].schematic.clone()).collect();
    join_signed(&parts)
}

fn source_name(s: Source) -> String {
    match s {
        Source::Criterion => "the criterion".into(),
        Source::Constraint(j) => format!("constraint {}", j + 1),
    }
}

fn nonsmooth(e: ExprError, source: Source, var: &str) -> LagrangeError {
    match e {
        ExprError::Nonsmooth { func, .. } => LagrangeError::Nonsmooth {
            source_name: source_name(source),
            var: var.to_string(),
            func,
        },
        other => other.into(),
    }
}

impl Group {
    /// Short tag: `first`, `second`, `parameter`, or `first; second at t = ...`.
    pub fn tag(&self, horizon: f64) -> String {
        match self {
            Group::First => "first".into(),
            Group::Second => "second".into(),
            Group::Parameter => "parameter".into(),
            Group::SecondAt(times) => {
                let ts: Vec<String> = times
                    .iter()
                    .map(|&t| if t == horizon { "tbar".to_string() } else { fmt_num(t) })
                    .collect();
                format!("first; second at t = {}", ts.join(", "))
            }
        }
    }
}

/// Where weights are sampled: at a mesh node or at an interval midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum At {
    Node(usize),
    Mid(usize),
}

/// Multipliers of a candidate prepared for pointwise evaluation.
#[derive(Debug, Clone)]
pub struct MultiplierView {
    pub mesh: Mesh,
    pub lambda0: f64,
    pub values: Vec<Multiplier>,
    /// Nodal `∫_t^T λ_j` for τ-indexed multipliers.
    tails: Vec<Option<Vec<f64>>>,
}

impl MultiplierView {
    pub fn new(cand: &SolutionCandidate) -> MultiplierView {
        Self::from_parts(cand.mesh.clone(), cand.lambda0, cand.multipliers.clone())
    }

    pub fn from_parts(mesh: Mesh, lambda0: f64, values: Vec<Multiplier>) -> MultiplierView {
        let tails = values
            .iter()
            .map(|m| match m {
                Multiplier::Function(v) => {
                    let mut tail = vec![0.0; v.len()];
                    for k in (0..v.len() - 1).rev() {
                        tail[k] = tail[k + 1] + 0.5 * mesh.h(k) * (v[k] + v[k + 1]);
                    }
                    Some(tail)
                }
                _ => None,
            })
            .collect();
        MultiplierView {
            mesh,
            lambda0,
            values,
            tails,
        }
    }

    fn nodal_at(&self, v: &[f64], at: At) -> f64 {
        match at {
            At::Node(k) => v[k],
            At::Mid(i) => 0.5 * (v[i] + v[i + 1]),
        }
    }

    fn multiplier_at(&self, j: usize, at: At) -> f64 {
        match &self.values[j] {
            Multiplier::Scalar(s) => *s,
            Multiplier::Function(v) | Multiplier::Adjoint(v) => self.nodal_at(v, at),
            Multiplier::None => 0.0,
        }
    }

    pub fn weight(&self, w: Weight, at: At) -> f64 {
        match w {
            Weight::Lambda0 => self.lambda0,
            Weight::Adjoint(j) | Weight::Multiplier(j) => self.multiplier_at(j, at),
            Weight::AdjointRate(j) => {
                let Some(v) = self.values[j].nodal() else { return 0.0 };
                let m = &self.mesh;
                match at {
                    At::Mid(i) => (v[i + 1] - v[i]) / m.h(i),
                    At::Node(k) => {
                        let last = m.len() - 1;
                        let (a, b) = (k.saturating_sub(1), (k + 1).min(last));
                        (v[b] - v[a]) / (m.t(b) - m.t(a))
                    }
                }
            }
            Weight::AdjointAtZero(j) => self.values[j].nodal().map_or(0.0, |v| v[0]),
            Weight::TailIntegral(j) => self.tails[j].as_ref().map_or(0.0, |v| self.nodal_at(v, at)),
            Weight::TailAtZero(j) => self.tails[j].as_ref().map_or(0.0, |v| v[0]),
        }
    }

    /// Weight of every term at `at`; kernel terms get 1 (their multiplier
    /// enters through the τ-integral).
    pub fn term_weights(&self, sys: &LagrangeSystem, at: At) -> Vec<f64> {
        sys.terms
            .iter()
            .map(|t| if t.kernel == Kernel::None { self.weight(t.weight, at) } else { 1.0 })
            .collect()
    }

    fn function(&self, j: usize) -> &[f64] {
        self.values[j].nodal().unwrap_or(&[])
    }
}

impl LagrangeSystem {
    pub fn new_slots(&self) -> Vec<f64> {
        vec![0.0; self.problem.layout().len()]
    }

    /// Loads time, states, slacks and parameters into a slot vector.
    pub fn load(&self, slots: &mut [f64], t: f64, x: &[f64], z: &[f64], a: &[f64]) {
        let p = &self.problem;
        slots[0] = t;
        for (i, v) in x.iter().enumerate() {
            slots[p.slot_state(i)] = *v;
        }
        for (i, v) in z.iter().enumerate() {
            slots[p.slot_slack(i)] = *v;
        }
        for (i, v) in a.iter().enumerate() {
            slots[p.slot_param(i)] = *v;
        }
    }

    pub fn set_controls(&self, slots: &mut [f64], u: &[f64]) {
        for (i, v) in u.iter().enumerate() {
            slots[self.problem.slot_control(i)] = *v;
        }
    }

    fn body(&self, k: usize, slots: &[f64], d: Option<usize>) -> f64 {
        let b = &self.bound[k];
        match d {
            None => b.value.eval(slots),
            Some(slot) => match b.partials.get(&slot) {
                None => 0.0,
                Some(None) => f64::NAN,
                Some(Some(e)) => e.eval(slots),
            },
        }
    }

    /// Value (or partial in slot `d`) of term `k` at the loaded point.
    pub fn term_value(&self, k: usize, slots: &mut [f64], weight: f64, mv: Option<&MultiplierView>, d: Option<usize>) -> f64 {
        let t = &self.terms[k];
        if t.kernel == Kernel::None {
            return weight * self.body(k, slots, d);
        }
        let Some(mv) = mv else { return 0.0 };
        let Weight::Multiplier(j) = t.weight else { return 0.0 };
        let lam = mv.function(j);
        if lam.is_empty() {
            return 0.0;
        }
        let mesh = &mv.mesh;
        let saved = slots[1];
        let now = slots[0];
        let total = match t.kernel {
            Kernel::Full => {
                let w = mesh.weights();
                let mut s = 0.0;
                for (n, tau) in mesh.nodes().iter().enumerate() {
                    if lam[n] != 0.0 {
                        slots[1] = *tau;
                        s += w[n] * lam[n] * self.body(k, slots, d);
                    }
                }
                s
            }
            Kernel::Causal => {
                let first = mesh.locate(now);
                let mut vals = vec![0.0; mesh.len()];
                for (n, v) in vals.iter_mut().enumerate().skip(first) {
                    if lam[n] != 0.0 {
                        slots[1] = mesh.t(n);
                        *v = lam[n] * self.body(k, slots, d);
                    }
                }
                mesh.tail_integral(&vals, now)
            }
            Kernel::None => unreachable!(),
        };
        slots[1] = saved;
        weight * total
    }

    /// Sum over the selected terms. With `atoms`, control-dependent terms
    /// are averaged over the atoms with their weights.
    #[allow(clippy::too_many_arguments)]
    pub fn eval_sum(
        &self,
        pick: impl Fn(usize) -> bool,
        slots: &mut [f64],
        weights: &[f64],
        mv: Option<&MultiplierView>,
        atoms: Option<&[Atom]>,
        d: Option<usize>,
    ) -> f64 {
        let mut total = 0.0;
        for k in 0..self.terms.len() {
            if !pick(k) {
                continue;
            }
            match atoms {
                Some(atoms) if self.bound[k].uses_controls => {
                    for a in atoms {
                        self.set_controls(slots, &a.u);
                        total += a.gamma * self.term_value(k, slots, weights[k], mv, d);
                    }
                }
                _ => total += self.term_value(k, slots, weights[k], mv, d),
            }
        }
        total
    }

    /// `H` at the controls currently loaded in `slots`.
    pub fn hamiltonian(&self, slots: &mut [f64], weights: &[f64], mv: Option<&MultiplierView>) -> f64 {
        self.eval_sum(|k| self.in_h[k], slots, weights, mv, None, None)
    }

    /// `∂R/∂(slot)` from interval-supported terms.
    pub fn grad_interval(&self, slot: usize, slots: &mut [f64], weights: &[f64], mv: Option<&MultiplierView>, atoms: Option<&[Atom]>) -> f64 {
        self.eval_sum(|k| self.terms[k].support == Support::Interval, slots, weights, mv, atoms, Some(slot))
    }

    /// `∂/∂(slot)` of the event terms at time `at`.
    pub fn grad_event(&self, at: f64, slot: usize, slots: &mut [f64], weights: &[f64], atoms: Option<&[Atom]>) -> f64 {
        self.eval_sum(|k| self.terms[k].support == Support::Event(at), slots, weights, None, atoms, Some(slot))
    }

    /// Distinct event times of the Lagrange function.
    pub fn event_times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for t in &self.terms {
            if let Support::Event(at) = t.support {
                if !out.contains(&at) {
                    out.push(at);
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }

    /// `∂S/∂a` for every parameter, with `S = ∫R dt` discretized by the
    /// interval trapezoid rule on the candidate's mesh.
    pub fn param_gradient(&self, cand: &SolutionCandidate, mv: &MultiplierView) -> Vec<f64> {
        let p = &self.problem;
        let mesh = &cand.mesh;
        let mut slots = self.new_slots();
        let node_weights: Vec<Vec<f64>> = (0..mesh.len()).map(|k| mv.term_weights(self, At::Node(k))).collect();
        let mut out = vec![0.0; p.n_params()];
        for (ip, g) in out.iter_mut().enumerate() {
            let slot = p.slot_param(ip);
            for i in 0..mesh.intervals() {
                let atoms = &cand.control.intervals[i];
                let mut side = |n: usize| {
                    self.load(&mut slots, mesh.t(n), &cand.states[n], &cand.slacks[n], &cand.params);
                    self.grad_interval(slot, &mut slots, &node_weights[n], Some(mv), Some(atoms))
                };
                *g += 0.5 * mesh.h(i) * (side(i) + side(i + 1));
            }
            for at in self.event_times() {
                let n = mesh.snap(at);
                let atoms = &cand.control.intervals[n.min(mesh.intervals() - 1)];
                self.load(&mut slots, mesh.t(n), &cand.states[n], &cand.slacks[n], &cand.params);
                *g += self.grad_event(at, slot, &mut slots, &node_weights[n], Some(atoms));
            }
        }
        out
    }

    /// Human-readable report: canonical form, `R`, the split, groups and
    /// adjoint equations.
    pub fn report_text(&self) -> String {
        let p = &self.problem;
        let mut out = String::new();
        out.push_str(&format!("horizon T = {}\n", fmt_num(p.horizon)));
        out.push_str("canonical constraints:\n");
        for j in 0..p.constraints.len() {
            let c = p.to_canonical(j);
            out.push_str(&format!(
                "  J_{} [{}]: f1 = {}; f2 = {}\n",
                j + 1,
                kind_name(p.constraints[j].kind()),
                c.f1_string(),
                c.f2_string()
            ));
        }
        out.push_str(&format!("R = {}\n", self.schematic()));
        out.push_str(&format!("R = {}\n", self.concrete()));
        out.push_str(&format!("H = {}\n", self.h_string()));
        out.push_str(&format!("N = {}\n", self.n_string()));
        out.push_str("groups:\n");
        for (name, g) in &self.classification.entries {
            out.push_str(&format!("  {}: {}\n", name, g.tag(p.horizon)));
        }
        if let Ok(adj) = self.adjoint_system() {
            for eq in adj {
                let n = eq.constraint + 1;
                let mut rhs = eq.rhs.to_string();
                for k in &eq.kernel_terms {
                    rhs.push_str(" + ");
                    rhs.push_str(k);
                }
                out.push_str(&format!("dpsi_{} = {}\n", n, rhs));
                for (at, jump) in &eq.jumps {
                    let when = if *at == p.horizon { "tbar".to_string() } else { fmt_num(*at) };
                    out.push_str(&format!("psi_{}({}-) - psi_{}({}+) = {}\n", n, when, n, when, jump));
                }
            }
        }
        out.push_str(&format!("relaxation slots: {}\n", crate::relax::extend(self).slots));
        out
    }

    pub fn report_json(&self) -> serde_json::Value {
        let p = &self.problem;
        let constraints: Vec<serde_json::Value> = (0..p.constraints.len())
            .map(|j| {
                let c = p.to_canonical(j);
                serde_json::json!({
                    "kind": kind_name(p.constraints[j].kind()),
                    "f1": c.f1_string(),
                    "f2": c.f2_string(),
                    "indexed": c.indexed,
                })
            })
            .collect();
        let terms: Vec<serde_json::Value> = (0..self.terms.len())
            .map(|k| {
                let t = &self.terms[k];
                let (neg, body) = self.concrete_term(k);
                serde_json::json!({
                    "source": source_name(t.source),
                    "class": match t.class { TermClass::Running => "running", TermClass::Point => "point" },
                    "support": match t.support {
                        Support::Interval => "interval".to_string(),
                        Support::Constant => "constant".to_string(),
                        Support::Event(at) => format!("event {}", fmt_num(at)),
                    },
                    "in_h": self.in_h[k],
                    "term": if neg { format!("-{}", body) } else { body },
                })
            })
            .collect();
        let groups: serde_json::Map<String, serde_json::Value> = self
            .classification
            .entries
            .iter()
            .map(|(n, g)| (n.clone(), serde_json::Value::String(g.tag(p.horizon))))
            .collect();
        serde_json::json!({
            "horizon": p.horizon,
            "constraints": constraints,
            "R_schematic": self.schematic(),
            "R": self.concrete(),
            "H": self.h_string(),
            "N": self.n_string(),
            "terms": terms,
            "groups": groups,
            "relaxation_slots": crate::relax::extend(self).slots,
        })
    }
}

pub fn kind_name(kind: ConstraintKind) -> &'static str {
    match kind {
        ConstraintKind::IntegralEq => "integral",
        ConstraintKind::PointwiseEq => "pointwise",
        ConstraintKind::TerminalEq => "terminal",
        ConstraintKind::Ode => "ode",
        ConstraintKind::Volterra => "volterra",
        ConstraintKind::Fredholm => "fredholm",
        ConstraintKind::Convolution => "convolution",
        ConstraintKind::Inequality => "ineq",
    }
}
