mod common;

use std::time::Instant;

use canonmp::canonical::load_problem;
use canonmp::expr::VarEnv;
use canonmp::lagrange::{contribution_for_constraint, contribution_for_criterion, schematic_of, Group, LagrangeSystem};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::golden::{FREDHOLM, MAXIMIN, SLACK, TWO_STATE};

fn system(text: &str) -> LagrangeSystem {
    LagrangeSystem::assemble(&load_problem(text).unwrap()).unwrap()
}

#[test]
fn golden_lagrange_functions() {
    let start = Instant::now();
    assert_eq!(
        system(TWO_STATE).schematic(),
        "lambda0*f0 + psi_1*f_1 + dpsi_1*x1 + psi_2*f_2 + dpsi_2*x2 + lambda0*F0*delta(t - tbar)"
    );
    assert_eq!(
        system(FREDHOLM).schematic(),
        "lambda0*f0 + int_0^T lambda_1(tau)*f_1(t,tau) dtau - lambda_1(t)*x"
    );
    let slack = load_problem(SLACK).unwrap();
    assert_eq!(schematic_of(&contribution_for_constraint(&slack, 0)), "lambda_1(t)*f_1 - lambda_1(t)*z1");
    let maximin = load_problem(MAXIMIN).unwrap();
    assert_eq!(schematic_of(&contribution_for_criterion(&maximin)), "lambda0*a/T + lambda(t)*f0 - lambda(t)*a");
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn fredholm_hamiltonian_contains_kernel_integral() {
    let s = system(FREDHOLM);
    assert!(s.in_h[1], "the integral term depends on u");
    assert!(!s.in_h[2]);
}

#[test]
fn classification_tags() {
    let s = system(TWO_STATE);
    assert_eq!(s.classification.group("u").unwrap().tag(1.0), "first");
    assert_eq!(s.classification.group("x1").unwrap().tag(1.0), "second");

    let demoted = system(&TWO_STATE.replace("\"-x1^2\" at 1", "\"-x1^2 - u^2\" at 1"));
    assert_eq!(demoted.classification.group("u").unwrap().tag(1.0), "first; second at t = tbar");

    let linked = system(
        "horizon 1\nstate x\ncontrol u box -1 1\ncriterion integral \"-x^2 - u^2\"\nconstraint pointwise \"x + u - t\"\n",
    );
    assert!(!linked.classification.has_first_group());
    assert_eq!(linked.classification.group("u").unwrap().tag(1.0), "second");
}

#[test]
fn corpus_split_sums_to_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for name in common::CORPUS {
        let s = common::system(name);
        let r = s.symbolic_sum(|_| true);
        let (n, h) = s.split_nh();
        let names: std::collections::BTreeSet<String> = r.variables().into_iter().chain(n.variables()).chain(h.variables()).collect();
        for _ in 0..200 {
            let env: VarEnv = names.iter().map(|v| (v.clone(), rng.random_range(-2.0..2.0))).collect();
            let (rv, nv, hv) = (r.eval(&env).unwrap(), n.eval(&env).unwrap(), h.eval(&env).unwrap());
            assert!((rv - nv - hv).abs() <= 1e-12 * (1.0 + rv.abs()), "{name}: {rv} vs {}", nv + hv);
        }
    }
}

/// Constraint lines that may be appended to the base problem below.
const EXTRA: [&str; 7] = [
    "constraint integral \"u - 0.2\"",
    "constraint pointwise \"y - u\"",
    "constraint terminal \"x + u\" at 1",
    "constraint terminal \"x - 0.5\" at 0.5",
    "constraint ineq \"1 - x - v\"",
    "constraint volterra y \"x*v\"",
    "constraint integral \"x*y\"",
];

const BASE: &str = "horizon 1
state x init 0
state y init 0
control u box -1 1
control v box -1 1
criterion integral \"-x^2 - u^2 - v^2\"
constraint ode x \"u + v\"
";

fn rank(g: Option<&Group>) -> u8 {
    match g {
        Some(Group::First) => 2,
        Some(Group::SecondAt(_)) => 1,
        _ => 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constraints_only_demote(mask in 0u8..128, extra in 0usize..7) {
        let chosen: Vec<&str> = (0..EXTRA.len()).filter(|k| mask & (1 << k) != 0 && *k != extra).map(|k| EXTRA[k]).collect();
        let mut text = BASE.to_string();
        for line in &chosen {
            text.push_str(line);
            text.push('\n');
        }
        if text.contains("volterra y") && text.contains("pointwise \"y") {
            // keep y bound by at most one equation
            text = text.replace("constraint pointwise \"y - u\"\n", "");
        }
        let Ok(p) = load_problem(&text) else { return Ok(()); };
        let before = LagrangeSystem::assemble(&p).unwrap();
        let mut larger = text.clone();
        larger.push_str(EXTRA[extra]);
        larger.push('\n');
        let Ok(q) = load_problem(&larger) else { return Ok(()); };
        let after = LagrangeSystem::assemble(&q).unwrap();
        for name in ["u", "v"] {
            prop_assert!(
                rank(after.classification.group(name)) <= rank(before.classification.group(name)),
                "{} promoted by {}", name, EXTRA[extra]
            );
        }
    }
}
