//! Python bindings: parse a problem, look at its Lagrange function, solve,
//! verify and run chattering studies.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use canonmp::candidate::SolutionCandidate;
use canonmp::canonical::{load_problem, CanonicalProblem};
use canonmp::chatter::{convergence_study, ChatterConfig};
use canonmp::lagrange::LagrangeSystem;
use canonmp::solve::{self, Method, SolverConfig};
use canonmp::verify::{self, VerifyConfig};

create_exception!(canonmp_py, CanonmpError, PyValueError, "Raised for invalid problems and failed solves.");

/// `(i, I_i, gap, max_J, max_x_dev)`.
type StudyRow = (usize, f64, f64, f64, f64);

fn err(e: impl std::fmt::Display) -> PyErr {
    CanonmpError::new_err(e.to_string())
}

/// A parsed problem with its assembled Lagrange function.
#[pyclass(module = "canonmp_py", frozen)]
struct Problem {
    problem: CanonicalProblem,
    system: LagrangeSystem,
}

#[pymethods]
impl Problem {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        let problem = load_problem(text).map_err(err)?;
        let system = LagrangeSystem::assemble(&problem).map_err(err)?;
        Ok(Problem { problem, system })
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| err(format!("{path}: {e}")))?;
        Self::new(&text)
    }

    /// `R` written with role names (`f0`, `f_1`, ...).
    #[getter]
    fn lagrangian(&self) -> String {
        self.system.schematic()
    }

    /// `R` with the problem's own expressions substituted.
    #[getter]
    fn lagrangian_concrete(&self) -> String {
        self.system.concrete()
    }

    #[getter]
    fn hamiltonian(&self) -> String {
        self.system.h_string()
    }

    /// Group tag of every declared unknown.
    #[getter]
    fn groups(&self) -> BTreeMap<String, String> {
        self.system
            .classification
            .entries
            .iter()
            .map(|(n, g)| (n.clone(), g.tag(self.problem.horizon)))
            .collect()
    }

    /// The text printed by `canonmp inspect`.
    fn report(&self) -> String {
        self.system.report_text()
    }

    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (method = "auto", mesh = None, ugrid = None, tol = None, relax = false, seed = 0))]
    fn solve(
        &self,
        py: Python<'_>,
        method: &str,
        mesh: Option<usize>,
        ugrid: Option<usize>,
        tol: Option<f64>,
        relax: bool,
        seed: u64,
    ) -> PyResult<Solution> {
        let method = match method {
            "auto" => Method::Auto,
            "indirect" => Method::Indirect,
            "collocation" => Method::Collocation,
            other => return Err(PyValueError::new_err(format!("unknown method `{other}`"))),
        };
        let defaults = SolverConfig::default();
        let cfg = SolverConfig {
            mesh: mesh.unwrap_or(defaults.mesh),
            ugrid: ugrid.unwrap_or(defaults.ugrid),
            tol: tol.unwrap_or(defaults.tol),
            relax,
            seed,
            ..defaults
        };
        let problem = &self.problem;
        let (system, candidate) = py.detach(|| solve::solve(problem, method, &cfg)).map_err(err)?;
        Ok(Solution {
            problem: problem.clone(),
            system,
            candidate,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(states={}, controls={}, constraints={})",
            self.problem.n_states(),
            self.problem.n_controls(),
            self.problem.constraints.len()
        )
    }
}

/// A solved candidate together with its problem.
#[pyclass(module = "canonmp_py", frozen)]
struct Solution {
    problem: CanonicalProblem,
    system: LagrangeSystem,
    candidate: SolutionCandidate,
}

#[pymethods]
impl Solution {
    #[getter]
    fn objective(&self) -> f64 {
        self.candidate.objective
    }

    #[getter]
    fn t(&self) -> Vec<f64> {
        self.candidate.mesh.nodes().to_vec()
    }

    /// Nodal states, one row per mesh node.
    #[getter]
    fn states(&self) -> Vec<Vec<f64>> {
        self.candidate.states.clone()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.candidate.params.clone()
    }

    /// Largest number of active atoms on any interval.
    #[getter]
    fn max_support(&self) -> usize {
        self.candidate.control.max_support()
    }

    /// Checks every optimality condition; returns `(verdict, checks)` with
    /// `checks[name] = (residual, tolerance, passed)`.
    fn verify(&self, py: Python<'_>) -> (bool, BTreeMap<String, (f64, f64, bool)>) {
        let report = py.detach(|| verify::report(&self.system, &self.candidate, &VerifyConfig::default()));
        let checks = report
            .entries
            .iter()
            .map(|e| (e.name.to_string(), (e.residual, e.tol, e.pass)))
            .collect();
        (report.verdict, checks)
    }

    /// Chattering study; one `(i, I_i, gap, max_J, max_x_dev)` tuple per count.
    #[pyo3(signature = (counts = vec![4, 8, 16, 32, 64]))]
    fn chatter(&self, py: Python<'_>, counts: Vec<usize>) -> PyResult<Vec<StudyRow>> {
        let study = py
            .detach(|| convergence_study(&self.problem, &self.candidate, &counts, &ChatterConfig::default()))
            .map_err(err)?;
        Ok(study
            .rows
            .iter()
            .map(|r| (r.partitions, r.objective, r.gap, r.max_j, r.max_x_dev))
            .collect())
    }

    /// The candidate file written by `canonmp solve --out`.
    fn to_json(&self) -> String {
        let header = self.candidate.header_json(&self.problem, serde_json::Value::Null);
        serde_json::to_string_pretty(&header).expect("candidates serialize")
    }

    fn __repr__(&self) -> String {
        format!("Solution(objective={}, nodes={})", self.candidate.objective, self.candidate.mesh.len())
    }
}

#[pymodule]
fn canonmp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<Solution>()?;
    m.add("CanonmpError", m.py().get_type::<CanonmpError>())?;
    Ok(())
}
