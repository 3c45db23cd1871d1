mod common;

use std::collections::BTreeSet;
use std::process::Command;

use canonmp::verify::{report, Perturbation, VerifyConfig};

#[test]
fn every_problem_verifies_and_every_perturbation_is_caught() {
    let cfg = VerifyConfig::default();
    for name in common::CORPUS {
        let (sys, cand) = common::solved(name);
        let base = report(&sys, &cand, &cfg);
        assert!(base.verdict, "{name}:\n{}", base.to_text());
        let applicable: BTreeSet<&'static str> = base.entries.iter().map(|e| e.name).collect();
        let mut applied = 0;
        for p in Perturbation::ALL {
            let Some(bad) = p.apply(&sys, &cand) else { continue };
            applied += 1;
            let got = report(&sys, &bad, &cfg);
            assert_eq!(got.failed(), p.intended(&sys, &applicable), "{name} / {}:\n{}", p.name(), got.to_text());
        }
        assert!(applied >= 3, "{name}: only {applied} perturbations applied");
    }
}

#[test]
fn relaxation_never_loses_to_ordinary_controls() {
    use canonmp::solve::{solve, Method, SolveError, SolverConfig};
    let mut compared = 0;
    for name in common::CORPUS {
        let p = common::load(name);
        let cfg = SolverConfig { mesh: 60, ..SolverConfig::default() };
        let plain = solve(&p, Method::Collocation, &cfg);
        let relaxed = solve(&p, Method::Collocation, &SolverConfig { relax: true, ..cfg });
        match (plain, relaxed) {
            (Ok((_, a)), Ok((_, b))) => {
                compared += 1;
                assert!(b.objective >= a.objective - 1e-6, "{name}: {} < {}", b.objective, a.objective);
            }
            (Err(SolveError::Unsupported(_)), _) | (_, Err(SolveError::Unsupported(_))) => {}
            (a, b) => panic!("{name}: {:?} / {:?}", a.err(), b.err()),
        }
    }
    assert!(compared >= 3, "only {compared} problems support both modes");
}

fn canonmp(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_canonmp")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap())
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = |f: &str| common::problem_path(f).to_string_lossy().into_owned();
    let out = dir.path().join("lq");
    let out_s = out.to_string_lossy().into_owned();

    let (code, text) = canonmp(&["inspect", &path("pontryagin")]);
    assert_eq!(code, 0);
    assert!(text.contains("R = lambda0*f0 + psi_1*f_1 + dpsi_1*x1 + psi_2*f_2 + dpsi_2*x2"));

    let (code, text) = canonmp(&["solve", &path("lq"), "--oracle", "--out", &out_s]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("oracle (collocation)") && text.contains("verdict: pass"));
    for f in ["candidate.csv", "candidate.json", "report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let cand = out.join("candidate.json").to_string_lossy().into_owned();
    let (code, first) = canonmp(&["verify", &path("lq"), &cand, "--json"]);
    assert_eq!(code, 0);
    let (_, second) = canonmp(&["verify", &path("lq"), &cand, "--json"]);
    assert_eq!(first, second);

    // a candidate for another problem does not fit
    let (code, _) = canonmp(&["verify", &path("pontryagin"), &cand]);
    assert_eq!(code, 2);
    let (code, _) = canonmp(&["chatter", &path("sliding"), "/nonexistent/candidate.json"]);
    assert_eq!(code, 2);

    let bad = dir.path().join("bad.ocp");
    std::fs::write(&bad, "horizon 1\nstate x init 0\ncriterion integral \"x +\"\n").unwrap();
    let (code, _) = canonmp(&["inspect", &bad.to_string_lossy()]);
    assert_eq!(code, 2);
}

#[test]
fn tampered_candidate_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let lq = common::problem_path("lq").to_string_lossy().into_owned();
    let out = dir.path().to_string_lossy().into_owned();
    assert_eq!(canonmp(&["solve", &lq, "--out", &out]).0, 0);
    let path = dir.path().join("candidate.json");
    let mut value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    value["candidate"]["lambda0"] = serde_json::json!(0.0);
    for m in value["candidate"]["multipliers"].as_array_mut().unwrap() {
        for v in m.as_object_mut().unwrap().values_mut() {
            if let Some(arr) = v.as_array_mut() {
                arr.iter_mut().for_each(|x| *x = serde_json::json!(0.0));
            }
        }
    }
    std::fs::write(&path, value.to_string()).unwrap();
    let (code, text) = canonmp(&["verify", &lq, &path.to_string_lossy()]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("nontriviality"));
}
