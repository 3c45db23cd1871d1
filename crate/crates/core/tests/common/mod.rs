//! Shared helpers for the integration tests: the bundled problem corpus
//! and the solver settings each problem is meant to be run with.

#![allow(dead_code)]

pub mod golden;
pub mod oracles;

use std::path::PathBuf;

use canonmp::canonical::{load_problem, CanonicalProblem};
use canonmp::candidate::SolutionCandidate;
use canonmp::lagrange::LagrangeSystem;
use canonmp::solve::{solve, Method, SolverConfig};

pub const CORPUS: [&str; 8] = ["lq", "terminal", "pontryagin", "convolution", "fredholm", "inequality", "maximin", "sliding"];

pub fn problem_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("problems").join(format!("{name}.ocp"))
}

pub fn load(name: &str) -> CanonicalProblem {
    let text = std::fs::read_to_string(problem_path(name)).unwrap();
    load_problem(&text).unwrap()
}

pub fn system(name: &str) -> LagrangeSystem {
    LagrangeSystem::assemble(&load(name)).unwrap()
}

/// Solver settings the corpus problem is run with.
pub fn config(name: &str) -> (Method, SolverConfig) {
    let base = SolverConfig::default();
    match name {
        "sliding" => (Method::Collocation, SolverConfig { relax: true, mesh: 100, ..base }),
        "convolution" | "fredholm" => (Method::Collocation, SolverConfig { mesh: 100, ..base }),
        _ => (Method::Auto, base),
    }
}

pub fn solved(name: &str) -> (LagrangeSystem, SolutionCandidate) {
    let (method, cfg) = config(name);
    solve(&load(name), method, &cfg).unwrap_or_else(|e| panic!("{name}: {e}"))
}
