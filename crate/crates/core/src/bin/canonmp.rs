//! Batch front end: inspect problem files, solve them, verify candidates and
//! run chattering studies.
//!
//! Exit codes: 0 success, 1 verification failed, 2 input or I/O error,
//! 3 solver failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use canonmp::candidate::SolutionCandidate;
use canonmp::canonical::{load_problem, CanonicalProblem, ProblemError};
use canonmp::chatter::{convergence_study, ChatterConfig, ChatterError};
use canonmp::lagrange::{LagrangeError, LagrangeSystem};
use canonmp::report::fmt_num;
use canonmp::solve::{self, Method, SolveError, SolverConfig};
use canonmp::verify::{self, VerificationReport, VerifyConfig};

#[derive(Parser)]
#[command(name = "canonmp", version, about = "Maximum-principle toolkit for canonical-form optimal control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the canonical form, the Lagrange function and the variable groups.
    Inspect {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Solve a problem, verify the result and write the candidate files.
    Solve(SolveArgs),
    /// Check the optimality conditions on a saved candidate.
    Verify {
        file: PathBuf,
        candidate: PathBuf,
        #[arg(long, default_value_t = 41)]
        ugrid: usize,
        #[arg(long)]
        json: bool,
    },
    /// Approximate a relaxed candidate by switching controls and tabulate
    /// the convergence.
    Chatter {
        file: PathBuf,
        candidate: PathBuf,
        /// Partition counts.
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
        counts: Vec<usize>,
        /// Integration steps per constant piece.
        #[arg(long, default_value_t = 16)]
        steps: usize,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Auto,
    Indirect,
    Collocation,
}

#[derive(Args)]
struct SolveArgs {
    file: PathBuf,
    #[arg(long)]
    mesh: Option<usize>,
    #[arg(long)]
    ugrid: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Solve the averaged problem over atomic controls.
    #[arg(long)]
    relax: bool,
    /// Re-solve with the other method and report the criterion difference.
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_enum, default_value = "auto")]
    method: MethodArg,
    /// Output directory for candidate.csv, candidate.json and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Problem { path: PathBuf, source: ProblemError },
    #[error("{0}")]
    Lagrange(#[from] LagrangeError),
    #[error("{path}: not a candidate: {source}")]
    Candidate { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Input(String),
    #[error("solver failed: {0}")]
    Solve(SolveError),
    #[error("{0}")]
    Chatter(ChatterError),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Solve(SolveError::Divergence { .. } | SolveError::Infeasible { .. } | SolveError::NanHamiltonian) => 3,
            CliError::Chatter(ChatterError::Diverged(..)) => 3,
            _ => 2,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn problem(path: &Path) -> Result<CanonicalProblem, CliError> {
    load_problem(&read(path)?).map_err(|source| CliError::Problem {
        path: path.to_path_buf(),
        source,
    })
}

fn candidate(path: &Path, problem: &CanonicalProblem) -> Result<SolutionCandidate, CliError> {
    let value: serde_json::Value = serde_json::from_str(&read(path)?).map_err(|source| CliError::Candidate {
        path: path.to_path_buf(),
        source,
    })?;
    let cand = SolutionCandidate::from_json(&value).map_err(|source| CliError::Candidate {
        path: path.to_path_buf(),
        source,
    })?;
    cand.check_shape(problem)
        .map_err(|m| CliError::Input(format!("{}: {}", path.display(), m)))?;
    Ok(cand)
}

fn pretty(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("JSON values serialize");
    s.push('\n');
    s
}

fn verdict_code(report: &VerificationReport) -> u8 {
    if report.verdict {
        0
    } else {
        1
    }
}

fn inspect(file: &Path, json: bool) -> Result<u8, CliError> {
    let sys = LagrangeSystem::assemble(&problem(file)?)?;
    if json {
        print!("{}", pretty(&sys.report_json()));
    } else {
        print!("{}", sys.report_text());
    }
    Ok(0)
}

fn run_solve(args: &SolveArgs) -> Result<u8, CliError> {
    let p = problem(&args.file)?;
    let defaults = SolverConfig::default();
    let cfg = SolverConfig {
        mesh: args.mesh.unwrap_or(defaults.mesh),
        ugrid: args.ugrid.unwrap_or(defaults.ugrid),
        tol: args.tol.unwrap_or(defaults.tol),
        relax: args.relax,
        seed: args.seed,
        ..defaults
    };
    let sys = LagrangeSystem::assemble(&p)?;
    let indirect = match args.method {
        MethodArg::Indirect => true,
        MethodArg::Collocation => false,
        MethodArg::Auto => !cfg.relax && solve::supports_indirect(&sys).is_ok(),
    };
    let method = if indirect { Method::Indirect } else { Method::Collocation };
    let (sys, cand) = solve::solve(&p, method, &cfg).map_err(CliError::Solve)?;
    let vcfg = VerifyConfig {
        ugrid: cfg.ugrid,
        ..VerifyConfig::default()
    };
    let report = verify::report(&sys, &cand, &vcfg);

    println!("method: {}", if indirect { "indirect" } else { "collocation" });
    println!("I = {}", fmt_num(cand.objective));
    if !cand.params.is_empty() {
        let a: Vec<String> = cand.params.iter().map(|v| fmt_num(*v)).collect();
        println!("a = {}", a.join(", "));
    }
    if cfg.relax {
        println!("max support = {}", cand.control.max_support());
    }
    if args.oracle {
        let other = if indirect { Method::Collocation } else { Method::Indirect };
        match solve::solve(&p, other, &cfg) {
            Ok((_, alt)) => println!(
                "oracle ({}): I = {}, |dI| = {}",
                if indirect { "collocation" } else { "indirect" },
                fmt_num(alt.objective),
                fmt_num((alt.objective - cand.objective).abs())
            ),
            Err(e) => println!("oracle unavailable: {}", e),
        }
    }
    print!("{}", report.to_text());

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        let config = serde_json::to_value(&cfg).expect("config serializes");
        write(&dir.join("candidate.csv"), &cand.to_csv(&p))?;
        write(&dir.join("candidate.json"), &pretty(&cand.header_json(&p, config)))?;
        write(&dir.join("report.json"), &pretty(&report.to_json()))?;
        if !cand.is_classical() {
            let names: Vec<String> = p.control_names().map(str::to_string).collect();
            write(&dir.join("controls.csv"), &cand.control.to_csv(&cand.mesh, &names))?;
        }
    }
    Ok(verdict_code(&report))
}

fn run_verify(file: &Path, cand_path: &Path, ugrid: usize, json: bool) -> Result<u8, CliError> {
    let p = problem(file)?;
    let cand = candidate(cand_path, &p)?;
    let sys = LagrangeSystem::assemble(&p)?;
    let cfg = VerifyConfig {
        ugrid,
        ..VerifyConfig::default()
    };
    let report = verify::report(&sys, &cand, &cfg);
    if json {
        print!("{}", pretty(&report.to_json()));
    } else {
        print!("{}", report.to_text());
    }
    Ok(verdict_code(&report))
}

fn slope_text(s: Option<f64>) -> String {
    s.map_or_else(|| "converged".to_string(), fmt_num)
}

fn run_chatter(file: &Path, cand_path: &Path, counts: &[usize], steps: usize, out: Option<&Path>) -> Result<u8, CliError> {
    let p = problem(file)?;
    let cand = candidate(cand_path, &p)?;
    let cfg = ChatterConfig {
        steps,
        ..ChatterConfig::default()
    };
    let study = convergence_study(&p, &cand, counts, &cfg).map_err(CliError::Chatter)?;
    let csv = study.to_csv();
    match out {
        Some(path) => write(path, &csv)?,
        None => print!("{}", csv),
    }
    for r in &study.rows {
        if let Some(e) = &r.error {
            eprintln!("i = {}: {}", r.partitions, e);
        }
    }
    eprintln!("slope gapI: {}", slope_text(study.gap_slope()));
    eprintln!("slope maxJ: {}", slope_text(study.constraint_slope()));
    eprintln!("slope maxXdev: {}", slope_text(study.state_slope()));
    let failed = study.rows.iter().any(|r| r.error.is_some());
    Ok(if failed { 3 } else { 0 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Inspect { file, json } => inspect(file, *json),
        Command::Solve(args) => run_solve(args),
        Command::Verify {
            file,
            candidate,
            ugrid,
            json,
        } => run_verify(file, candidate, *ugrid, *json),
        Command::Chatter {
            file,
            candidate,
            counts,
            steps,
            out,
        } => run_chatter(file, candidate, counts, *steps, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.code())
        }
    }
}
