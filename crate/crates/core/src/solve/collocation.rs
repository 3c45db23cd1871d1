//! Direct transcription: nodal states and slacks, per-interval controls (or
//! atoms with weights), parameters; the criterion and every constraint
//! functional are discretized with the interval trapezoid rule and the
//! constraints enforced by an augmented Lagrangian.

use std::cell::RefCell;

use crate::candidate::{Multiplier, SolutionCandidate};
use crate::canonical::{ConstraintSpec, ControlSet, Mesh, TAU};
use crate::expr::{BoundExpr, Expr, Layout};
use crate::lagrange::{Group, LagrangeError, LagrangeSystem};
use crate::relax::{caratheodory_reduce, extend, Atom, RelaxedControl};

use super::{SolveError, SolverConfig};

/// Cap on augmented-Lagrangian outer iterations.
const MAX_OUTER: usize = 60;

#[derive(Debug, Clone, Copy)]
enum Wrt {
    State(usize),
    Control(usize),
    Param(usize),
    Slack(usize),
}

/// Bound integrand with its partial derivatives.
struct Diffed {
    value: BoundExpr,
    partials: Vec<(Wrt, BoundExpr)>,
    uses_controls: bool,
}

impl Diffed {
    fn new(e: &Expr, sys: &LagrangeSystem, layout: &Layout) -> Result<Option<Diffed>, SolveError> {
        if e.is_zero() {
            return Ok(None);
        }
        let p = &sys.problem;
        let mut partials = Vec::new();
        let mut uses_controls = false;
        let mut push = |name: &str, wrt: Wrt| -> Result<(), SolveError> {
            if e.depends_on(name) {
                let d = e.diff(name).map_err(LagrangeError::from)?;
                partials.push((wrt, d.bind(layout).map_err(LagrangeError::from)?));
            }
            Ok(())
        };
        for (i, s) in p.states.iter().enumerate() {
            push(&s.name, Wrt::State(i))?;
        }
        for (i, c) in p.controls.iter().enumerate() {
            if e.depends_on(&c.name) {
                uses_controls = true;
            }
            push(&c.name, Wrt::Control(i))?;
        }
        for (i, a) in p.params.iter().enumerate() {
            push(&a.name, Wrt::Param(i))?;
        }
        for (i, z) in p.slacks.iter().enumerate() {
            push(z, Wrt::Slack(i))?;
        }
        Ok(Some(Diffed {
            value: e.bind(layout).map_err(LagrangeError::from)?,
            partials,
            uses_controls,
        }))
    }
}

/// Offsets of each block in the decision vector.
#[derive(Debug, Clone)]
struct Vars {
    intervals: usize,
    ns: usize,
    nc: usize,
    na: usize,
    nz: usize,
    atoms: usize,
    /// Atom controls are decision variables (false for fixed finite atoms).
    free_u: bool,
    /// Atom weights are decision variables.
    free_gamma: bool,
    ox: usize,
    ou: usize,
    og: usize,
    oa: usize,
    oz: usize,
    len: usize,
}

impl Vars {
    #[allow(clippy::too_many_arguments)]
    fn new(intervals: usize, ns: usize, nc: usize, na: usize, nz: usize, atoms: usize, free_u: bool, free_gamma: bool) -> Vars {
        let nodes = intervals + 1;
        let ox = 0;
        let ou = ox + nodes * ns;
        let og = ou + if free_u { intervals * atoms * nc } else { 0 };
        let oa = og + if free_gamma { intervals * atoms } else { 0 };
        let oz = oa + na;
        let len = oz + nodes * nz;
        Vars { intervals, ns, nc, na, nz, atoms, free_u, free_gamma, ox, ou, og, oa, oz, len }
    }
    fn x(&self, n: usize, s: usize) -> usize {
        self.ox + n * self.ns + s
    }
    fn u(&self, i: usize, nu: usize, d: usize) -> usize {
        self.ou + (i * self.atoms + nu) * self.nc + d
    }
    fn gamma(&self, i: usize, nu: usize) -> usize {
        self.og + i * self.atoms + nu
    }
    fn a(&self, p: usize) -> usize {
        self.oa + p
    }
    fn z(&self, n: usize, q: usize) -> usize {
        self.oz + n * self.nz + q
    }
}

/// Where a point term is evaluated: at a node, or at an interval midpoint
/// with averaged states.
#[derive(Debug, Clone, Copy)]
enum Pt {
    Node(usize),
    Mid(usize),
}

struct Con {
    /// Point-only τ-indexed constraints are imposed at interval midpoints,
    /// where each interval's control lives; their slacks are per interval.
    mid: bool,
    /// Slack of an inequality. Slack variables stay at zero in the decision
    /// vector and are minimized out of the augmented Lagrangian in closed
    /// form, so the body alone is the row residual.
    slack: Option<usize>,
    run: Option<Diffed>,
    run_tau: bool,
    step: Option<Diffed>,
    step_tau: bool,
    point: Option<Diffed>,
    event: Option<usize>,
    indexed: bool,
}

struct Transcription<'a> {
    sys: &'a LagrangeSystem,
    mesh: Mesh,
    node_w: Vec<f64>,
    vars: Vars,
    /// Fixed atom controls (finite sets in relaxed mode).
    fixed_atoms: Option<Vec<Vec<f64>>>,
    cons: Vec<Con>,
    obj_run: Option<Diffed>,
    obj_events: Vec<(Diffed, usize)>,
    slots: RefCell<Vec<f64>>,
}

impl<'a> Transcription<'a> {
    fn atom_u<'v>(&'v self, v: &'v [f64], i: usize, nu: usize) -> &'v [f64] {
        match &self.fixed_atoms {
            Some(a) => &a[nu],
            None => {
                let s = self.vars.u(i, nu, 0);
                &v[s..s + self.vars.nc]
            }
        }
    }

    fn gamma(&self, v: &[f64], i: usize, nu: usize) -> f64 {
        if self.vars.free_gamma {
            v[self.vars.gamma(i, nu)]
        } else {
            1.0
        }
    }

    fn load(&self, slots: &mut [f64], v: &[f64], pt: Pt, tau: f64) {
        let p = &self.sys.problem;
        let vs = &self.vars;
        let (n, t) = match pt {
            Pt::Node(n) => (n, self.mesh.t(n)),
            Pt::Mid(i) => (i, self.mesh.midpoint(i)),
        };
        slots[0] = t;
        slots[1] = tau;
        for s in 0..vs.ns {
            slots[p.slot_state(s)] = match pt {
                Pt::Node(_) => v[vs.x(n, s)],
                Pt::Mid(i) => 0.5 * (v[vs.x(i, s)] + v[vs.x(i + 1, s)]),
            };
        }
        for q in 0..vs.nz {
            slots[p.slot_slack(q)] = v[vs.z(n, q)];
        }
        for a in 0..vs.na {
            slots[p.slot_param(a)] = v[vs.a(a)];
        }
    }

    fn set_u(&self, slots: &mut [f64], u: &[f64]) {
        let p = &self.sys.problem;
        for (d, x) in u.iter().enumerate() {
            slots[p.slot_control(d)] = *x;
        }
    }

    /// `g` at `pt` with the atoms of interval `i`.
    fn value(&self, g: &Diffed, v: &[f64], pt: Pt, i: usize, tau: f64) -> f64 {
        let mut slots = self.slots.borrow_mut();
        self.load(&mut slots, v, pt, tau);
        if !g.uses_controls {
            return g.value.eval(&slots);
        }
        let mut total = 0.0;
        for nu in 0..self.vars.atoms {
            self.set_u(&mut slots, self.atom_u(v, i, nu));
            total += self.gamma(v, i, nu) * g.value.eval(&slots);
        }
        total
    }

    #[allow(clippy::too_many_arguments)]
    fn add_grad(&self, g: &Diffed, v: &[f64], pt: Pt, i: usize, tau: f64, coef: f64, out: &mut [f64]) {
        if coef == 0.0 {
            return;
        }
        let vs = &self.vars;
        let mut slots = self.slots.borrow_mut();
        self.load(&mut slots, v, pt, tau);
        let n = match pt {
            Pt::Node(n) | Pt::Mid(n) => n,
        };
        let atoms = if g.uses_controls { vs.atoms } else { 1 };
        for nu in 0..atoms {
            let gamma = if g.uses_controls {
                self.set_u(&mut slots, self.atom_u(v, i, nu));
                self.gamma(v, i, nu)
            } else {
                1.0
            };
            let c = coef * gamma;
            for (wrt, d) in &g.partials {
                let idx = match *wrt {
                    Wrt::State(s) => match pt {
                        Pt::Node(_) => vs.x(n, s),
                        Pt::Mid(_) => {
                            let half = 0.5 * c * d.eval(&slots);
                            out[vs.x(n, s)] += half;
                            out[vs.x(n + 1, s)] += half;
                            continue;
                        }
                    },
                    Wrt::Slack(q) => vs.z(n, q),
                    Wrt::Param(a) => vs.a(a),
                    Wrt::Control(dim) => {
                        if !vs.free_u {
                            continue;
                        }
                        vs.u(i, nu, dim)
                    }
                };
                out[idx] += c * d.eval(&slots);
            }
            if g.uses_controls && vs.free_gamma {
                out[vs.gamma(i, nu)] += coef * g.value.eval(&slots);
            }
        }
    }

    fn trap(&self, g: &Diffed, v: &[f64], i: usize, tau: f64) -> f64 {
        0.5 * self.mesh.h(i) * (self.value(g, v, Pt::Node(i), i, tau) + self.value(g, v, Pt::Node(i + 1), i, tau))
    }

    fn trap_grad(&self, g: &Diffed, v: &[f64], i: usize, tau: f64, coef: f64, out: &mut [f64]) {
        let c = 0.5 * self.mesh.h(i) * coef;
        self.add_grad(g, v, Pt::Node(i), i, tau, c, out);
        self.add_grad(g, v, Pt::Node(i + 1), i, tau, c, out);
    }

    fn point_at(&self, con: &Con, k: usize) -> (Pt, usize) {
        if con.mid {
            return (Pt::Mid(k), k);
        }
        let n = con.event.unwrap_or(k);
        (Pt::Node(n), n.min(self.vars.intervals - 1))
    }

    fn rows(&self, con: &Con) -> usize {
        match (con.mid, con.indexed) {
            (true, _) => self.vars.intervals,
            (false, true) => self.vars.intervals + 1,
            (false, false) => 1,
        }
    }

    fn tau_of(&self, con: &Con, k: usize) -> f64 {
        match (con.mid, con.indexed) {
            (true, _) => self.mesh.midpoint(k),
            (false, true) => self.mesh.t(k),
            (false, false) => 0.0,
        }
    }

    fn residuals(&self, v: &[f64]) -> Vec<Vec<f64>> {
        let n = self.vars.intervals;
        self.cons
            .iter()
            .map(|con| {
                let rows = self.rows(con);
                let run_const = match &con.run {
                    Some(g) if !con.run_tau => (0..n).map(|i| self.trap(g, v, i, 0.0)).sum(),
                    _ => 0.0,
                };
                let mut prefix = vec![0.0; n + 1];
                if let Some(g) = con.step.as_ref().filter(|_| !con.step_tau) {
                    for i in 0..n {
                        prefix[i + 1] = prefix[i] + self.trap(g, v, i, 0.0);
                    }
                }
                (0..rows)
                    .map(|k| {
                        let tau = self.tau_of(con, k);
                        let mut r = run_const;
                        if let Some(g) = con.run.as_ref().filter(|_| con.run_tau) {
                            r += (0..n).map(|i| self.trap(g, v, i, tau)).sum::<f64>();
                        }
                        if let Some(g) = &con.step {
                            r += if con.step_tau { (0..k).map(|i| self.trap(g, v, i, tau)).sum() } else { prefix[k] };
                        }
                        if let Some(g) = &con.point {
                            let (pt, iv) = self.point_at(con, k);
                            r += self.value(g, v, pt, iv, tau);
                        }
                        r
                    })
                    .collect()
            })
            .collect()
    }

    /// Adds the gradient of `Σ_k ω_k c_k` for one constraint.
    fn constraint_grad(&self, con: &Con, v: &[f64], omega: &[f64], out: &mut [f64]) {
        let n = self.vars.intervals;
        if let Some(g) = &con.run {
            if con.run_tau {
                for (k, w) in omega.iter().enumerate() {
                    for i in 0..n {
                        self.trap_grad(g, v, i, self.tau_of(con, k), *w, out);
                    }
                }
            } else {
                let total: f64 = omega.iter().sum();
                for i in 0..n {
                    self.trap_grad(g, v, i, 0.0, total, out);
                }
            }
        }
        if let Some(g) = &con.step {
            if con.step_tau {
                for (k, w) in omega.iter().enumerate() {
                    for i in 0..k {
                        self.trap_grad(g, v, i, self.tau_of(con, k), *w, out);
                    }
                }
            } else {
                let mut suffix = 0.0;
                for i in (0..n).rev() {
                    if i + 1 < omega.len() {
                        suffix += omega[i + 1];
                    }
                    self.trap_grad(g, v, i, 0.0, suffix, out);
                }
            }
        }
        if let Some(g) = &con.point {
            for (k, w) in omega.iter().enumerate() {
                let (pt, iv) = self.point_at(con, k);
                self.add_grad(g, v, pt, iv, self.tau_of(con, k), *w, out);
            }
        }
    }

    fn objective(&self, v: &[f64]) -> f64 {
        let mut total = 0.0;
        if let Some(g) = &self.obj_run {
            total += (0..self.vars.intervals).map(|i| self.trap(g, v, i, 0.0)).sum::<f64>();
        }
        for (g, n) in &self.obj_events {
            total += self.value(g, v, Pt::Node(*n), (*n).min(self.vars.intervals - 1), 0.0);
        }
        total
    }

    fn objective_grad(&self, v: &[f64], coef: f64, out: &mut [f64]) {
        if let Some(g) = &self.obj_run {
            for i in 0..self.vars.intervals {
                self.trap_grad(g, v, i, 0.0, coef, out);
            }
        }
        for (g, n) in &self.obj_events {
            self.add_grad(g, v, Pt::Node(*n), (*n).min(self.vars.intervals - 1), 0.0, coef, out);
        }
    }

    fn weight_residuals(&self, v: &[f64]) -> Vec<f64> {
        if !self.vars.free_gamma {
            return Vec::new();
        }
        (0..self.vars.intervals)
            .map(|i| (0..self.vars.atoms).map(|nu| v[self.vars.gamma(i, nu)]).sum::<f64>() - 1.0)
            .collect()
    }

    fn row_weights(&self, con: &Con) -> Vec<f64> {
        match (con.mid, con.indexed) {
            (true, _) => (0..self.vars.intervals).map(|i| self.mesh.h(i)).collect(),
            (false, true) => self.node_w.clone(),
            (false, false) => vec![1.0],
        }
    }
}

struct AugLag {
    mu: Vec<Vec<f64>>,
    mu_w: Vec<f64>,
    rho: f64,
}

impl<'a> Transcription<'a> {
    /// Optimal slacks `z = max(0, f + μ/ρ)` of the inequality rows.
    fn optimal_slacks(&self, res: &[Vec<f64>], al: &AugLag) -> Vec<Option<Vec<f64>>> {
        self.cons
            .iter()
            .zip(res)
            .zip(&al.mu)
            .map(|((con, f), mu)| {
                con.slack?;
                Some(f.iter().zip(mu).map(|(fk, mk)| (fk + mk / al.rho).max(0.0)).collect())
            })
            .collect()
    }

    /// Row residuals with the optimal slacks subtracted.
    fn effective_residuals(&self, mut res: Vec<Vec<f64>>, al: &AugLag) -> Vec<Vec<f64>> {
        let slacks = self.optimal_slacks(&res, al);
        for (c, z) in res.iter_mut().zip(slacks) {
            if let Some(z) = z {
                c.iter_mut().zip(z).for_each(|(ck, zk)| *ck -= zk);
            }
        }
        res
    }

    /// Augmented Lagrangian `−I + Σ wt_k (μ_k c_k + ρ/2 c_k²)` and its gradient.
    fn al_value_grad(&self, v: &[f64], al: &AugLag, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut f = -self.objective(v);
        self.objective_grad(v, -1.0, grad);
        let res = self.effective_residuals(self.residuals(v), al);
        for ((con, c), mu) in self.cons.iter().zip(&res).zip(&al.mu) {
            let wt = self.row_weights(con);
            let mut omega = vec![0.0; c.len()];
            for k in 0..c.len() {
                f += wt[k] * (mu[k] * c[k] + 0.5 * al.rho * c[k] * c[k]);
                omega[k] = wt[k] * (mu[k] + al.rho * c[k]);
            }
            self.constraint_grad(con, v, &omega, grad);
        }
        let e = self.weight_residuals(v);
        for (i, ei) in e.iter().enumerate() {
            let h = self.mesh.h(i);
            f += h * (al.mu_w[i] * ei + 0.5 * al.rho * ei * ei);
            let om = h * (al.mu_w[i] + al.rho * ei);
            for nu in 0..self.vars.atoms {
                grad[self.vars.gamma(i, nu)] += om;
            }
        }
        f
    }
}

/// Box-constrained L-BFGS with projected backtracking line search.
/// Returns the iterations used and the final projected-gradient norm.
fn lbfgs_box(f: &mut impl FnMut(&[f64], &mut [f64]) -> f64, y: &mut [f64], lo: &[f64], hi: &[f64], tol: f64, max_iter: usize) -> (usize, f64) {
    const MEMORY: usize = 12;
    let n = y.len();
    let project = |v: &mut [f64]| {
        for i in 0..n {
            v[i] = v[i].clamp(lo[i], hi[i]);
        }
    };
    project(y);
    let mut g = vec![0.0; n];
    let mut fx = f(y, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut g_new = vec![0.0; n];
    let mut trial = vec![0.0; n];
    // consecutive steps that changed f only at roundoff level
    let mut flat = 0;
    let mut last_pg = f64::INFINITY;
    for it in 0..max_iter {
        let mut pg = 0.0f64;
        let mut free = vec![true; n];
        for i in 0..n {
            let stepped = (y[i] - g[i]).clamp(lo[i], hi[i]);
            pg = pg.max((stepped - y[i]).abs());
            if (y[i] <= lo[i] && g[i] > 0.0) || (y[i] >= hi[i] && g[i] < 0.0) {
                free[i] = false;
            }
        }
        last_pg = pg;
        if pg <= tol || flat >= 5 {
            return (it, pg);
        }
        let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|j| 1.0 / dot(&s_hist[j], &y_hist[j])).collect();
        for j in (0..k).rev() {
            alpha[j] = rho[j] * dot(&s_hist[j], &q);
            axpy(-alpha[j], &y_hist[j], &mut q);
        }
        if k > 0 {
            let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for j in 0..k {
            let beta = rho[j] * dot(&y_hist[j], &q);
            axpy(alpha[j] - beta, &s_hist[j], &mut q);
        }
        let mut d: Vec<f64> = (0..n).map(|i| if free[i] { -q[i] } else { 0.0 }).collect();
        if dot(&d, &g) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            d = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        }
        let mut step = if s_hist.is_empty() {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (1.0 / dmax.max(1e-300)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = (y[i] + step * d[i]).clamp(lo[i], hi[i]);
            }
            let f_new = f(&trial, &mut g_new);
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - y[i])).sum();
            if f_new.is_finite() && f_new <= fx + 1e-4 * decrease {
                let s: Vec<f64> = (0..n).map(|i| trial[i] - y[i]).collect();
                let yk: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
                let sy = dot(&s, &yk);
                if sy > 1e-12 * dot(&yk, &yk).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                    if s_hist.len() == MEMORY {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                    s_hist.push(s);
                    y_hist.push(yk);
                }
                y.copy_from_slice(&trial);
                std::mem::swap(&mut g, &mut g_new);
                if fx - f_new <= 1e-14 * fx.abs().max(1.0) {
                    flat += 1;
                } else {
                    flat = 0;
                }
                fx = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            flat += 1;
            if s_hist.is_empty() {
                return (it, last_pg);
            }
            s_hist.clear();
            y_hist.clear();
        }
    }
    (max_iter, last_pg)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Cartesian product of finite control sets.
fn finite_atoms(sets: &[ControlSet]) -> Option<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for s in sets {
        let ControlSet::Finite(vals) = s else { return None };
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        out = out
            .into_iter()
            .flat_map(|prefix| {
                sorted.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    Some(out)
}

/// Solves the discretized problem (or its averaged relaxation when
/// `cfg.relax`) and recovers multiplier estimates from the final
/// augmented-Lagrangian multipliers.
pub fn solve_collocation(sys: &LagrangeSystem, cfg: &SolverConfig) -> Result<SolutionCandidate, SolveError> {
    let p = &sys.problem;
    let layout = p.layout();
    let mesh = Mesh::uniform(cfg.mesh, p.horizon);
    let n = mesh.intervals();
    let sets: Vec<ControlSet> = p.controls.iter().map(|c| c.set.clone()).collect();
    let any_finite = sets.iter().any(|s| matches!(s, ControlSet::Finite(_)));

    let (atoms, free_u, free_gamma, fixed_atoms) = if cfg.relax {
        if p.controls.iter().any(|c| sys.classification.group(&c.name) != Some(&Group::First)) {
            return Err(SolveError::Unsupported("relaxation needs every control to be first-group".into()));
        }
        let slots = extend(sys).slots.max(1);
        if any_finite {
            let fixed = finite_atoms(&sets)
                .ok_or_else(|| SolveError::Unsupported("relaxation cannot mix finite and box control sets".into()))?;
            (fixed.len(), false, true, Some(fixed))
        } else {
            (slots, true, slots > 1, None)
        }
    } else {
        if any_finite {
            return Err(SolveError::Unsupported("collocation over a finite control set needs --relax".into()));
        }
        (1, true, false, None)
    };
    let vars = Vars::new(n, p.n_states(), p.n_controls(), p.n_params(), p.n_slacks(), atoms, free_u, free_gamma);

    let mut cons = Vec::new();
    for j in 0..p.constraints.len() {
        let ci = p.to_canonical(j);
        let point_only = ci.running.is_zero() && ci.step.is_zero() && ci.event.is_none();
        cons.push(Con {
            mid: ci.indexed && point_only,
            slack: match p.constraints[j] {
                ConstraintSpec::Inequality { slack, .. } => Some(slack),
                _ => None,
            },
            run_tau: ci.running.depends_on(TAU),
            step_tau: ci.step.depends_on(TAU),
            run: Diffed::new(&ci.running, sys, &layout)?,
            step: Diffed::new(&ci.step, sys, &layout)?,
            point: Diffed::new(&ci.point, sys, &layout)?,
            event: ci.event.map(|at| mesh.snap(at)),
            indexed: ci.indexed,
        });
    }
    let obj = p.canonical_objective();
    let mut obj_events = Vec::new();
    for (e, at) in &obj.events {
        if let Some(d) = Diffed::new(e, sys, &layout)? {
            obj_events.push((d, mesh.snap(*at)));
        }
    }
    let tr = Transcription {
        sys,
        node_w: mesh.weights(),
        obj_run: Diffed::new(&obj.running, sys, &layout)?,
        mesh: mesh.clone(),
        vars: vars.clone(),
        fixed_atoms,
        cons,
        obj_events,
        slots: RefCell::new(sys.new_slots()),
    };

    // bounds, scaling and initial point
    let mut lo = vec![f64::NEG_INFINITY; vars.len];
    let mut hi = vec![f64::INFINITY; vars.len];
    let mut scale = vec![1.0; vars.len];
    let mut v0 = vec![0.0; vars.len];
    for k in 0..=n {
        for s in 0..vars.ns {
            v0[vars.x(k, s)] = p.initial_value(s);
            scale[vars.x(k, s)] = tr.node_w[k];
        }
        for q in 0..vars.nz {
            lo[vars.z(k, q)] = 0.0;
            hi[vars.z(k, q)] = 0.0;
        }
    }
    for i in 0..n {
        for nu in 0..atoms {
            if free_u {
                for (d, set) in sets.iter().enumerate() {
                    let idx = vars.u(i, nu, d);
                    scale[idx] = mesh.h(i);
                    if let ControlSet::Box { lo: l, hi: h } = *set {
                        lo[idx] = l;
                        hi[idx] = h;
                        v0[idx] = if atoms > 1 { l + (h - l) * (nu as f64 + 0.5) / atoms as f64 } else { set.neutral() };
                    }
                }
            }
            if free_gamma {
                let idx = vars.gamma(i, nu);
                lo[idx] = 0.0;
                scale[idx] = mesh.h(i);
                v0[idx] = 1.0 / atoms as f64;
            }
        }
    }
    for (ip, prm) in p.params.iter().enumerate() {
        let idx = vars.a(ip);
        scale[idx] = p.horizon;
        if let Some((l, h)) = prm.bounds {
            lo[idx] = l;
            hi[idx] = h;
            v0[idx] = 0.5 * (l + h);
        }
    }
    let sq: Vec<f64> = scale.iter().map(|s| s.sqrt()).collect();
    let mut y: Vec<f64> = v0.iter().zip(&sq).map(|(v, s)| v * s).collect();
    let ylo: Vec<f64> = lo.iter().zip(&sq).map(|(v, s)| v * s).collect();
    let yhi: Vec<f64> = hi.iter().zip(&sq).map(|(v, s)| v * s).collect();
    let mut al = AugLag {
        mu: tr.cons.iter().map(|c| vec![0.0; tr.rows(c)]).collect(),
        mu_w: vec![0.0; if free_gamma { n } else { 0 }],
        rho: cfg.penalty_start,
    };
    let mut v = vec![0.0; vars.len];
    let mut gv = vec![0.0; vars.len];
    // ρ grows tenfold (at most `penalty_rounds − 1` times) whenever the
    // violation fails to shrink fourfold; multipliers update every round.
    let rho_max = cfg.penalty_start * 10f64.powi(cfg.penalty_rounds.saturating_sub(1) as i32);
    let mut prev = f64::INFINITY;
    let mut worst = f64::INFINITY;
    let mut slacks = Vec::new();
    for round in 0..MAX_OUTER {
        let mut fg = |yy: &[f64], g: &mut [f64]| {
            for i in 0..yy.len() {
                v[i] = yy[i] / sq[i];
            }
            let f = tr.al_value_grad(&v, &al, &mut gv);
            for i in 0..g.len() {
                g[i] = gv[i] / sq[i];
            }
            f
        };
        let (iters, pg) = lbfgs_box(&mut fg, &mut y, &ylo, &yhi, cfg.inner_tol, cfg.max_inner);
        for i in 0..y.len() {
            v[i] = y[i] / sq[i];
        }
        let raw = tr.residuals(&v);
        slacks = tr.optimal_slacks(&raw, &al);
        let res = tr.effective_residuals(raw, &al);
        let wres = tr.weight_residuals(&v);
        worst = res.iter().flatten().chain(&wres).fold(0.0f64, |m, c| m.max(c.abs()));
        log::debug!("collocation round {round}: rho {:e}, {iters} iterations, |c| {worst:e}, pg {pg:e}", al.rho);
        for (mu, c) in al.mu.iter_mut().zip(&res) {
            for (m, ck) in mu.iter_mut().zip(c) {
                *m += al.rho * ck;
            }
        }
        for (m, e) in al.mu_w.iter_mut().zip(&wres) {
            *m += al.rho * e;
        }
        if worst <= cfg.feas_tol * 1e-3 && pg <= cfg.inner_tol * 1e2 {
            break;
        }
        if worst > 0.25 * prev && al.rho < rho_max {
            al.rho = (al.rho * 10.0).min(rho_max);
        }
        prev = worst;
    }
    if worst.is_nan() || worst > cfg.feas_tol {
        return Err(SolveError::Infeasible { residual: worst });
    }

    // assemble the candidate
    let states: Vec<Vec<f64>> = (0..=n).map(|k| (0..vars.ns).map(|s| v[vars.x(k, s)]).collect()).collect();
    let mut control = RelaxedControl {
        intervals: (0..n)
            .map(|i| {
                (0..atoms)
                    .map(|nu| Atom {
                        gamma: tr.gamma(&v, i, nu).max(0.0),
                        u: tr.atom_u(&v, i, nu).to_vec(),
                    })
                    .collect()
            })
            .collect(),
    };
    if cfg.relax {
        normalize(&mut control);
        control.prune();
        reduce_support(&tr, &v, &mut control, extend(sys).slots.max(1))?;
    }
    let mut cand = SolutionCandidate::new(p, mesh.clone(), states, control);
    let mut nodal_slacks = vec![vec![0.0; n + 1]; vars.nz];
    for (con, z) in tr.cons.iter().zip(&slacks) {
        if let (Some(q), Some(z)) = (con.slack, z) {
            nodal_slacks[q] = if con.mid { slacks_to_nodes(z) } else { z.clone() };
        }
    }
    cand.slacks = (0..=n).map(|k| nodal_slacks.iter().map(|s| s[k]).collect()).collect();
    cand.params = (0..vars.na).map(|a| v[vars.a(a)]).collect();
    for (j, c) in p.constraints.iter().enumerate() {
        let lam: Vec<f64> = al.mu[j].iter().map(|m| -m).collect();
        if tr.cons[j].mid {
            cand.multipliers[j] = Multiplier::Function(midpoints_to_nodes(&lam));
            continue;
        }
        cand.multipliers[j] = match c.kind() {
            crate::canonical::ConstraintKind::Ode => Multiplier::Adjoint(adjoint_from_multipliers(&tr.node_w, &lam)),
            crate::canonical::ConstraintKind::IntegralEq | crate::canonical::ConstraintKind::TerminalEq => Multiplier::Scalar(lam[0]),
            _ => Multiplier::Function(lam),
        };
    }
    cand.objective = p.criterion_value(&cand)?;
    Ok(cand)
}

/// `ψ(t) = −∫_t^T λ` from nodal multipliers. The tail sum `Ψ_n` starting
/// at node `n` covers half a step before the node, so it sits at
/// `t_n − h/2`; nodal values average neighbours, and the end nodes
/// extrapolate linearly. Mass at the last node (a terminal event) carries
/// into `ψ(T)` in full; the first node's mass (the initial condition) is
/// excluded.
fn adjoint_from_multipliers(w: &[f64], lam: &[f64]) -> Vec<f64> {
    let n = lam.len() - 1;
    let mut tail = vec![0.0; n + 2];
    for k in (0..=n).rev() {
        tail[k] = tail[k + 1] - w[k] * lam[k];
    }
    let mut psi = vec![0.0; n + 1];
    for k in 1..n {
        psi[k] = 0.5 * (tail[k] + tail[k + 1]);
    }
    psi[n] = if n >= 2 { 1.5 * tail[n] - 0.5 * tail[n - 1] } else { tail[n] };
    psi[0] = if n >= 3 { 1.5 * tail[1] - 0.5 * tail[2] } else { psi[1.min(n)] };
    psi
}

/// Nodal values from interval values: ends copy, interior nodes average.
/// The trapezoid integral of the result equals the midpoint sum of the
/// input, so multiplier masses are preserved.
fn midpoints_to_nodes(m: &[f64]) -> Vec<f64> {
    let n = m.len();
    let mut out = Vec::with_capacity(n + 1);
    out.push(m[0]);
    for i in 1..n {
        out.push(0.5 * (m[i - 1] + m[i]));
    }
    out.push(m[n - 1]);
    out
}

/// Nodal slacks from interval slacks: a node next to an active interval
/// is active, which keeps complementarity exact at the nodes.
fn slacks_to_nodes(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut out = Vec::with_capacity(n + 1);
    out.push(z[0]);
    for i in 1..n {
        out.push(z[i - 1].min(z[i]));
    }
    out.push(z[n - 1]);
    out
}

fn normalize(control: &mut RelaxedControl) {
    for atoms in &mut control.intervals {
        let s: f64 = atoms.iter().map(|a| a.gamma).sum();
        if s > 0.0 {
            atoms.iter_mut().for_each(|a| a.gamma /= s);
        }
    }
}

/// Carathéodory reduction per interval: keeps the interval means of the
/// constraint integrands that hold first-group controls (at the midpoint
/// state) and does not decrease the criterion integrand.
fn reduce_support(tr: &Transcription, v: &[f64], control: &mut RelaxedControl, bound: usize) -> Result<(), SolveError> {
    let sys = tr.sys;
    let p = &sys.problem;
    let layout = p.layout();
    let obj = p.canonical_objective().running.bind(&layout).map_err(LagrangeError::from)?;
    let mut bodies = Vec::new();
    for (k, t) in sys.terms.iter().enumerate() {
        if sys.in_h[k] && matches!(t.source, crate::lagrange::Source::Constraint(_)) {
            bodies.push(t.expr.bind(&layout).map_err(LagrangeError::from)?);
        }
    }
    let mut slots = sys.new_slots();
    for i in 0..tr.vars.intervals {
        if control.intervals[i].len() <= bound {
            continue;
        }
        tr.load(&mut slots, v, Pt::Mid(i), 0.0);
        let atoms = &control.intervals[i];
        let points: Vec<Vec<f64>> = atoms
            .iter()
            .map(|a| {
                sys.set_controls(&mut slots, &a.u);
                std::iter::once(obj.eval(&slots)).chain(bodies.iter().map(|b| b.eval(&slots))).collect()
            })
            .collect();
        let weights: Vec<f64> = atoms.iter().map(|a| a.gamma).collect();
        let r = caratheodory_reduce(&points, &weights).map_err(|e| SolveError::Unsupported(e.to_string()))?;
        control.intervals[i] = r
            .indices
            .iter()
            .zip(&r.weights)
            .map(|(&k, &g)| Atom { gamma: g, u: atoms[k].u.clone() })
            .collect();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::load_problem;

    fn run(text: &str, cfg: SolverConfig) -> SolutionCandidate {
        let sys = LagrangeSystem::assemble(&load_problem(text).unwrap()).unwrap();
        solve_collocation(&sys, &cfg).unwrap()
    }

    #[test]
    fn lq_value() {
        let c = run(
            "horizon 1\nstate x init 1\ncontrol u box -10 10\ncriterion integral \"-(x^2 + u^2)\"\nconstraint ode x \"u\"\n",
            SolverConfig { mesh: 200, ..SolverConfig::default() },
        );
        assert!((c.objective + 1f64.tanh()).abs() < 1e-3, "{}", c.objective);
        let psi = c.multipliers[0].nodal().unwrap();
        // ψ = 2 x' = -2 sinh(1 - t)/cosh(1)
        for (k, t) in c.mesh.nodes().iter().enumerate() {
            let exact = -2.0 * (1.0 - t).sinh() / 1f64.cosh();
            assert!((psi[k] - exact).abs() < 2e-2, "t={} psi={} exact={}", t, psi[k], exact);
        }
    }

    #[test]
    fn adjoint_recovery_of_constant_multiplier() {
        let w = Mesh::uniform(4, 1.0).weights();
        let psi = adjoint_from_multipliers(&w, &[0.0, 1.0, 1.0, 1.0, 1.0]);
        // ψ(t) = −(1 − t) away from the ends
        assert!((psi[2] + 0.5).abs() < 1e-12);
        assert!(psi[4].abs() < 1e-12);
        assert!((psi[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn maximin_budget() {
        let c = run(
            "horizon 1\ncontrol u box 0 5\ncriterion maximin \"u*(1 + t)\"\nconstraint integral \"u - 1\"\n",
            SolverConfig { mesh: 100, ..SolverConfig::default() },
        );
        let exact = 1.0 / std::f64::consts::LN_2;
        // piecewise-constant controls bias the budget by about h/4
        assert!((c.params[0] - exact).abs() < 1e-2, "a = {}", c.params[0]);
        let lam = c.multipliers.last().unwrap().nodal().unwrap();
        let nodes = c.mesh.nodes();
        // end nodes carry half a trapezoid weight, so only their mass is meaningful
        for k in 1..nodes.len() - 2 {
            let want = exact / (1.0 + nodes[k]);
            assert!((lam[k] - want).abs() < 5e-2, "t={} lambda={} want={}", nodes[k], lam[k], want);
        }
        let mass: f64 = c.mesh.weights().iter().zip(lam).map(|(w, l)| w * l).sum();
        assert!((mass - c.lambda0).abs() < 1e-6, "{}", mass);
    }

    #[test]
    fn sliding_relaxation() {
        let c = run(
            "horizon 1\nstate x init 0\ncontrol u set -1 1\ncriterion integral \"-x^2\"\nconstraint ode x \"u\"\n",
            SolverConfig { mesh: 40, relax: true, ..SolverConfig::default() },
        );
        assert!(c.objective.abs() < 1e-3, "{}", c.objective);
        for atoms in &c.control.intervals {
            assert!(atoms.len() <= 2);
            for a in atoms {
                assert!((a.gamma - 0.5).abs() < 0.05, "{:?}", atoms);
            }
        }
    }

    #[test]
    fn finite_set_needs_relaxation() {
        let sys = LagrangeSystem::assemble(
            &load_problem("horizon 1\nstate x init 0\ncontrol u set -1 1\ncriterion integral \"-x^2\"\nconstraint ode x \"u\"\n").unwrap(),
        )
        .unwrap();
        assert!(matches!(solve_collocation(&sys, &SolverConfig::default()), Err(SolveError::Unsupported(_))));
    }
}
