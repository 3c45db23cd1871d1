use crate::candidate::control_grid;
use crate::canonical::ControlSet;

use super::{SolveError, SolverConfig};

const GOLDEN_ITERS: usize = 60;

/// Maximizes `h` over the control set: grid search in lexicographic order
/// (the first of equal values wins), then golden-section passes on each box
/// dimension within one grid step, kept only on strict improvement.
pub fn maximize_h(mut h: impl FnMut(&[f64]) -> f64, sets: &[ControlSet], cfg: &SolverConfig) -> Result<(Vec<f64>, f64), SolveError> {
    let grids: Vec<Vec<f64>> = sets
        .iter()
        .map(|s| {
            let mut g = control_grid(s, cfg.ugrid);
            g.sort_by(f64::total_cmp);
            g
        })
        .collect();
    if grids.is_empty() {
        let v = h(&[]);
        return if v.is_nan() { Err(SolveError::NanHamiltonian) } else { Ok((Vec::new(), v)) };
    }
    let mut idx = vec![0usize; grids.len()];
    let mut u: Vec<f64> = grids.iter().map(|g| g[0]).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    loop {
        for (d, g) in grids.iter().enumerate() {
            u[d] = g[idx[d]];
        }
        let v = h(&u);
        if !v.is_nan() && best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((u.clone(), v));
        }
        // odometer with the last dimension fastest = lexicographic order
        let mut d = grids.len();
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < grids[d].len() {
                break;
            }
            idx[d] = 0;
            if d == 0 {
                d = usize::MAX;
                break;
            }
        }
        if d == usize::MAX {
            break;
        }
    }
    let (mut u, mut best_v) = best.ok_or(SolveError::NanHamiltonian)?;
    for _ in 0..cfg.refine_passes {
        for (d, set) in sets.iter().enumerate() {
            let ControlSet::Box { lo, hi } = *set else { continue };
            if hi <= lo {
                continue;
            }
            let step = (hi - lo) / (cfg.ugrid.max(2) - 1) as f64;
            let (a, b) = ((u[d] - step).max(lo), (u[d] + step).min(hi));
            let mut probe = u.clone();
            let mut f = |x: f64| {
                probe[d] = x;
                let v = h(&probe);
                if v.is_nan() { f64::NEG_INFINITY } else { v }
            };
            let x = golden_max(&mut f, a, b);
            let v = f(x);
            if v > best_v {
                best_v = v;
                u[d] = x;
            }
        }
    }
    Ok((u, best_v))
}

fn golden_max(f: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd { c } else { d }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> Vec<ControlSet> {
        vec![ControlSet::Box { lo: -1.0, hi: 1.0 }]
    }

    #[test]
    fn quadratic_vertex() {
        let (u, _) = maximize_h(|u| -u[0] * u[0] + 0.5 * u[0], &unit_box(), &SolverConfig::default()).unwrap();
        assert!((u[0] - 0.25).abs() < 1e-8);
        let (u, _) = maximize_h(|u| -(u[0] - 0.3141).powi(2), &unit_box(), &SolverConfig::default()).unwrap();
        assert!((u[0] - 0.3141).abs() < 1e-8);
    }

    #[test]
    fn bang_and_tie() {
        let (u, v) = maximize_h(|u| 0.7 * u[0], &unit_box(), &SolverConfig::default()).unwrap();
        assert_eq!((u[0], v), (1.0, 0.7));
        let set = vec![ControlSet::Finite(vec![1.0, -1.0])];
        let (u, _) = maximize_h(|u| 0.0 * u[0], &set, &SolverConfig::default()).unwrap();
        assert_eq!(u[0], -1.0);
    }

    #[test]
    fn two_dimensions_and_nan() {
        let sets = vec![ControlSet::Box { lo: -1.0, hi: 1.0 }, ControlSet::Finite(vec![0.0, 2.0])];
        let (u, _) = maximize_h(|u| -(u[0] - 0.5).powi(2) + u[1], &sets, &SolverConfig::default()).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-8 && u[1] == 2.0);
        assert_eq!(maximize_h(|_| f64::NAN, &unit_box(), &SolverConfig::default()), Err(SolveError::NanHamiltonian));
        let (u, _) = maximize_h(|u| if u[0] < 0.0 { f64::NAN } else { -u[0] }, &unit_box(), &SolverConfig::default()).unwrap();
        assert_eq!(u[0], 0.0);
    }
}
