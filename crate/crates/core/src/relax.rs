//! Averaged (sliding-regime) extension: controls become finite atomic
//! measures `Σ γ_ν δ(u − u_ν)` and the Hamiltonian part of the Lagrange
//! function is replaced by its γ-weighted average over the atoms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::Mesh;
use crate::report::fmt_num;

/// Weight at or below which an atom counts as inactive.
pub const ACTIVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub gamma: f64,
    pub u: Vec<f64>,
}

/// Piecewise-constant atomic control: one list of atoms per mesh interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedControl {
    pub intervals: Vec<Vec<Atom>>,
}

impl RelaxedControl {
    /// Ordinary control: one atom of weight one per interval.
    pub fn classical(values: Vec<Vec<f64>>) -> RelaxedControl {
        RelaxedControl {
            intervals: values.into_iter().map(|u| vec![Atom { gamma: 1.0, u }]).collect(),
        }
    }

    pub fn is_classical(&self) -> bool {
        self.intervals.iter().all(|a| a.len() == 1 && a[0].gamma == 1.0)
    }

    /// γ-weighted mean control on an interval.
    pub fn mean(&self, i: usize) -> Vec<f64> {
        let atoms = &self.intervals[i];
        let dim = atoms.first().map_or(0, |a| a.u.len());
        let mut out = vec![0.0; dim];
        for a in atoms {
            for (o, u) in out.iter_mut().zip(&a.u) {
                *o += a.gamma * u;
            }
        }
        out
    }

    pub fn active(&self, i: usize) -> impl Iterator<Item = &Atom> {
        self.intervals[i].iter().filter(|a| a.gamma > ACTIVE_TOL)
    }

    /// Largest number of active atoms on any interval.
    pub fn max_support(&self) -> usize {
        (0..self.intervals.len()).map(|i| self.active(i).count()).max().unwrap_or(0)
    }

    /// Largest deviation of `Σγ` from one, and the most negative weight.
    pub fn weight_defects(&self) -> (f64, f64) {
        let mut sum_err = 0.0f64;
        let mut neg = 0.0f64;
        for atoms in &self.intervals {
            let s: f64 = atoms.iter().map(|a| a.gamma).sum();
            sum_err = sum_err.max((s - 1.0).abs());
            for a in atoms {
                neg = neg.max(-a.gamma);
            }
        }
        (sum_err, neg)
    }

    /// Drops inactive atoms and rescales the rest to sum to one.
    pub fn prune(&mut self) {
        for atoms in &mut self.intervals {
            let keep: Vec<Atom> = atoms.iter().filter(|a| a.gamma > ACTIVE_TOL).cloned().collect();
            if keep.is_empty() {
                continue;
            }
            let s: f64 = keep.iter().map(|a| a.gamma).sum();
            *atoms = keep
                .into_iter()
                .map(|a| Atom { gamma: a.gamma / s, u: a.u })
                .collect();
        }
    }

    /// CSV with columns `t, nu, gamma, u...`; `t` is the interval start.
    pub fn to_csv(&self, mesh: &Mesh, control_names: &[String]) -> String {
        let mut out = String::from("t,nu,gamma");
        for n in control_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, atoms) in self.intervals.iter().enumerate() {
            for (nu, a) in atoms.iter().enumerate() {
                out.push_str(&format!("{},{},{}", fmt_num(mesh.t(i)), nu, fmt_num(a.gamma)));
                for u in &a.u {
                    out.push(',');
                    out.push_str(&fmt_num(*u));
                }
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReduceError {
    #[error("no support points")]
    Empty,
    #[error("point {0} has the wrong dimension")]
    Dimension(usize),
    #[error("weights must be nonnegative and sum to one (sum {sum}, min {min})")]
    NotProbability { sum: f64, min: f64 },
}

/// Output of [`caratheodory_reduce`]: indices into the input and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSupport {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Reduces a discrete measure over points `(f0, f1..fm)` to at most `m + 1`
/// atoms, keeping the means of `f1..fm` and not decreasing the mean of `f0`.
///
/// Each step moves the weights along an affine null direction of the
/// constraint values, oriented so the `f0` mean does not drop, until one
/// weight reaches zero. Arithmetic is plain `f64`.
pub fn caratheodory_reduce(points: &[Vec<f64>], weights: &[f64]) -> Result<ReducedSupport, ReduceError> {
    let dim = points.first().ok_or(ReduceError::Empty)?.len();
    if dim == 0 || weights.len() != points.len() {
        return Err(ReduceError::Dimension(0));
    }
    if let Some(i) = points.iter().position(|p| p.len() != dim) {
        return Err(ReduceError::Dimension(i));
    }
    let sum: f64 = weights.iter().sum();
    let min = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-12 || (sum - 1.0).abs() > 1e-9 || !sum.is_finite() {
        return Err(ReduceError::NotProbability { sum, min });
    }
    let m = dim - 1;
    let mut w: Vec<f64> = weights.iter().map(|v| v.max(0.0)).collect();
    let mut support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    while support.len() > m + 1 {
        let cols = &support[..m + 2];
        // rows: Σc = 0 and Σ c·f_j = 0 for j = 1..m
        let mut a: Vec<Vec<f64>> = (0..=m)
            .map(|r| cols.iter().map(|&i| if r == 0 { 1.0 } else { points[i][r] }).collect())
            .collect();
        let mut c = null_vector(&mut a);
        let gain: f64 = c.iter().zip(cols).map(|(ci, &i)| ci * points[i][0]).sum();
        if gain < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        let (arg, theta) = c
            .iter()
            .zip(cols)
            .filter(|(ci, _)| **ci < 0.0)
            .map(|(ci, &i)| (i, w[i] / -ci))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("an affine null vector has a negative entry");
        for (ci, &i) in c.iter().zip(cols) {
            w[i] = (w[i] + theta * ci).max(0.0);
        }
        w[arg] = 0.0;
        support.retain(|&i| w[i] > 0.0);
    }
    Ok(ReducedSupport {
        weights: support.iter().map(|&i| w[i]).collect(),
        indices: support,
    })
}

/// Nonzero null vector of a matrix with more columns than rows, by
/// elimination to reduced row echelon form with partial pivoting.
fn null_vector(a: &mut [Vec<f64>]) -> Vec<f64> {
    let rows = a.len();
    let cols = a[0].len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut pivots = Vec::new();
    let mut r = 0;
    for col in 0..cols {
        if r == rows {
            break;
        }
        let p = (r..rows).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        if a[p][col].abs() <= 1e-14 * scale {
            continue;
        }
        a.swap(r, p);
        let d = a[r][col];
        a[r].iter_mut().for_each(|v| *v /= d);
        for k in 0..rows {
            if k != r {
                let f = a[k][col];
                if f != 0.0 {
                    for c in 0..cols {
                        a[k][c] -= f * a[r][c];
                    }
                }
            }
        }
        pivots.push(col);
        r += 1;
    }
    let free = (0..cols).find(|c| !pivots.contains(c)).expect("more columns than rows");
    let mut x = vec![0.0; cols];
    x[free] = 1.0;
    for (row, &pc) in pivots.iter().enumerate() {
        x[pc] = -a[row][free];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_example_reduces_to_single_point() {
        let pts = vec![vec![0.0, -1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let r = caratheodory_reduce(&pts, &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(r.indices, vec![2]);
        assert!((r.weights[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_support_unchanged() {
        let pts = vec![vec![0.0, -1.0], vec![0.0, 1.0]];
        let r = caratheodory_reduce(&pts, &[0.5, 0.5]).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
        assert_eq!(r.weights, vec![0.5, 0.5]);
        let r = caratheodory_reduce(&[vec![3.0, 4.0]], &[1.0]).unwrap();
        assert_eq!((r.indices, r.weights), (vec![0], vec![1.0]));
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(caratheodory_reduce(&[vec![0.0], vec![1.0]], &[0.7, 0.7]).is_err());
        assert!(caratheodory_reduce(&[], &[]).is_err());
    }

    #[test]
    fn classical_control_helpers() {
        let mut rc = RelaxedControl::classical(vec![vec![1.0], vec![-1.0]]);
        assert!(rc.is_classical());
        assert_eq!(rc.max_support(), 1);
        rc.intervals[0] = vec![Atom { gamma: 0.5, u: vec![1.0] }, Atom { gamma: 0.5, u: vec![-1.0] }, Atom { gamma: 0.0, u: vec![0.0] }];
        assert_eq!(rc.max_support(), 2);
        assert_eq!(rc.mean(0), vec![0.0]);
        rc.prune();
        assert_eq!(rc.intervals[0].len(), 2);
        let csv = rc.to_csv(&Mesh::uniform(2, 1.0), &["u".into()]);
        assert_eq!(csv, "t,nu,gamma,u\n0,0,0.5,1\n0,1,0.5,-1\n0.5,0,1,-1\n");
    }
}

/// The averaged extension of a Lagrange system: `R̃ = N + Σ γ_k H(u_k)`.
#[derive(Debug, Clone, Copy)]
pub struct RelaxedSystem<'a> {
    pub base: &'a crate::lagrange::LagrangeSystem,
    /// Constraints whose `H`-terms contain first-group variables.
    pub m: usize,
    /// Atom slots per interval: `m + 1`, or 0 without first-group variables.
    pub slots: usize,
}

pub fn extend(sys: &crate::lagrange::LagrangeSystem) -> RelaxedSystem<'_> {
    let m = sys.u_constraint_count();
    let slots = if sys.classification.has_first_group() && sys.in_h.iter().any(|h| *h) { m + 1 } else { 0 };
    RelaxedSystem { base: sys, m, slots }
}
