mod common;

use std::time::Instant;

use canonmp::candidate::control_grid;
use canonmp::canonical::{load_problem, ControlSet};
use canonmp::solve::{maximize_h, solve, Method, SolverConfig};
use proptest::prelude::*;

const LQ: &str = "horizon 1
state x init 1
control u box -3 3
criterion integral \"-(x^2 + u^2)\"
constraint ode x \"u\"
";

#[test]
fn lq_both_methods_hit_closed_form() {
    let p = load_problem(LQ).unwrap();
    let exact = -(1.0f64).tanh();
    for method in [Method::Indirect, Method::Collocation] {
        let start = Instant::now();
        let (_, cand) = solve(&p, method, &SolverConfig::default()).unwrap();
        assert!((cand.objective - exact).abs() < 1e-3, "{method:?}: {}", cand.objective);
        assert!(start.elapsed().as_secs_f64() < 10.0);
        // x = cosh(1 - t) / cosh 1
        for (k, x) in cand.states.iter().enumerate() {
            let t = cand.mesh.t(k);
            assert!((x[0] - (1.0 - t).cosh() / 1.0f64.cosh()).abs() < 1e-3, "{method:?} at t = {t}");
        }
    }
}

/// `x'' = x`, `x(0) = 1`, `x(1) = 1/2`: `x = cosh t + B sinh t`.
fn terminal_oracle() -> (f64, f64, f64) {
    let b = (0.5 - 1.0f64.cosh()) / 1.0f64.sinh();
    let x1 = 0.5;
    let dx0 = b;
    let dx1 = 1.0f64.sinh() + b * 1.0f64.cosh();
    // I = -∫(x² + x'²) = -[x x']_0^1
    let value = -(x1 * dx1 - dx0);
    // ψ = 2u = 2x', and ψ(1) = λ̃ ∂F/∂x = λ̃
    (value, 2.0 * dx1, b)
}

#[test]
fn terminal_multiplier_matches_closed_form() {
    let p = common::load("terminal");
    let (value, lambda_tilde, b) = terminal_oracle();
    let (_, ind) = solve(&p, Method::Indirect, &SolverConfig::default()).unwrap();
    let xt = ind.states.last().unwrap()[0];
    assert!((xt - 0.5).abs() <= 1e-6, "F = {}", xt - 0.5);
    assert!((ind.objective - value).abs() < 1e-3);
    let lt = ind.lambda_tilde(&p).unwrap();
    assert!((lt - lambda_tilde).abs() < 1e-2, "{lt} vs {lambda_tilde}");
    let psi_end = ind.multipliers[0].nodal().unwrap().last().copied().unwrap();
    assert!((psi_end - lt).abs() < 1e-9, "psi(T) = {psi_end}, shift {lt}");
    for (k, x) in ind.states.iter().enumerate() {
        let t = ind.mesh.t(k);
        assert!((x[0] - (t.cosh() + b * t.sinh())).abs() < 1e-3);
    }
    let (_, col) = solve(&p, Method::Collocation, &SolverConfig::default()).unwrap();
    assert!((col.objective - ind.objective).abs() < 1e-3);
}

#[test]
fn volterra_form_matches_ode_form() {
    let volterra = load_problem(&LQ.replace("constraint ode x", "constraint volterra x")).unwrap();
    let cfg = SolverConfig { mesh: 100, ..SolverConfig::default() };
    let (_, v) = solve(&volterra, Method::Collocation, &cfg).unwrap();
    assert!((v.objective + 1.0f64.tanh()).abs() < 1e-3, "{}", v.objective);
    let ode = load_problem(LQ).unwrap();
    let (sys_o, _) = solve(&ode, Method::Indirect, &cfg).unwrap();
    let sys_v = canonmp::lagrange::LagrangeSystem::assemble(&volterra).unwrap();
    assert_eq!(sys_o.classification, sys_v.classification);
}

#[test]
fn sliding_regime_is_two_atoms() {
    let (_, cand) = common::solved("sliding");
    assert!(cand.control.max_support() <= 2);
    assert!(cand.objective.abs() < 1e-3);
    let mid = cand.mesh.intervals() / 2;
    let atoms: Vec<_> = cand.control.active(mid).collect();
    assert_eq!(atoms.len(), 2);
    for a in atoms {
        assert!((a.gamma - 0.5).abs() < 0.05);
    }
}

#[test]
fn maximin_mass_identity() {
    let p = common::load("maximin");
    let (_, cand) = common::solved("maximin");
    let (_, _, j) = p.criterion.maximin().unwrap();
    let lam = cand.multipliers[j].nodal().unwrap();
    let mass: f64 = cand.mesh.weights().iter().zip(lam).map(|(w, l)| w * l).sum();
    assert!((mass - cand.lambda0).abs() <= 1e-6, "{mass}");
    assert!(lam.iter().all(|l| *l >= 0.0));
}

#[test]
fn same_seed_same_bytes() {
    let p = common::load("inequality");
    let cfg = SolverConfig { mesh: 60, seed: 3, ..SolverConfig::default() };
    let (_, a) = solve(&p, Method::Auto, &cfg).unwrap();
    let (_, b) = solve(&p, Method::Auto, &cfg).unwrap();
    assert_eq!(a.to_csv(&p), b.to_csv(&p));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn maximizer_never_loses_to_the_grid(
        a in -2.0f64..2.0, b in 0.5f64..6.0, c in -3.0f64..3.0, d in -1.0f64..1.0,
        lo in -2.0f64..0.0, width in 0.1f64..4.0,
    ) {
        let h = |u: &[f64]| a * (b * u[0] + c).sin() + d * u[0] * u[0] + 0.3 * u[0] * u[1] - u[1] * u[1];
        let sets = [ControlSet::Box { lo, hi: lo + width }, ControlSet::Finite(vec![-1.0, 0.0, 0.5])];
        let cfg = SolverConfig::default();
        let (u, v) = maximize_h(h, &sets, &cfg).unwrap();
        prop_assert!(sets[0].contains(u[0], 1e-12) && sets[1].contains(u[1], 0.0));
        prop_assert_eq!(v, h(&u));
        let mut grid_best = f64::NEG_INFINITY;
        for g0 in control_grid(&sets[0], cfg.ugrid) {
            for g1 in control_grid(&sets[1], cfg.ugrid) {
                grid_best = grid_best.max(h(&[g0, g1]));
            }
        }
        prop_assert!(v >= grid_best);
        // the global maximum lies within half a grid step of a grid point,
        // so no finer search can gain more than C h² / 8
        let h_grid = width / (cfg.ugrid - 1) as f64;
        let step = h_grid / 20.0;
        let mut fine_best = f64::NEG_INFINITY;
        for k in 0..=20 * (cfg.ugrid - 1) {
            let u0 = lo + k as f64 * step;
            for g1 in [-1.0, 0.0, 0.5] {
                fine_best = fine_best.max(h(&[u0, g1]));
            }
        }
        let curvature = a.abs() * b * b + 2.0 * d.abs();
        prop_assert!(v >= fine_best - curvature * h_grid * h_grid / 8.0, "{} < {}", v, fine_best);
    }
}
