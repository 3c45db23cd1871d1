//! Independent oracles shared by the integration tests and the acceptance
//! suite.

use canonmp::expr::{self, Expr, Func};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

pub fn instance(rng: &mut ChaCha8Rng, m: usize, n: usize, integer: bool) -> Instance {
    let points = (0..n)
        .map(|_| {
            (0..=m)
                .map(|_| if integer { rng.random_range(-2i32..=2) as f64 } else { rng.random_range(-1.0..1.0) })
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Instance {
        points,
        weights: raw.iter().map(|w| w / total).collect(),
    }
}

pub fn means(points: &[Vec<f64>], idx: &[usize], w: &[f64]) -> Vec<f64> {
    let dim = points[0].len();
    (0..dim).map(|d| idx.iter().zip(w).map(|(&i, wi)| wi * points[i][d]).sum()).collect()
}

/// Least-squares weights on `idx` for `Σw = 1`, `Σw f_j = target_j`, by
/// normal equations with Gaussian elimination; `None` if singular.
fn fit(points: &[Vec<f64>], idx: &[usize], target: &[f64]) -> Option<Vec<f64>> {
    let k = idx.len();
    let rows: Vec<Vec<f64>> = std::iter::once(vec![1.0; k])
        .chain((1..points[0].len()).map(|d| idx.iter().map(|&i| points[i][d]).collect()))
        .collect();
    let rhs: Vec<f64> = std::iter::once(1.0).chain(target[1..].iter().copied()).collect();
    let mut a = vec![vec![0.0; k + 1]; k];
    for r in 0..k {
        for c in 0..k {
            a[r][c] = rows.iter().map(|row| row[r] * row[c]).sum();
        }
        a[r][k] = rows.iter().zip(&rhs).map(|(row, b)| row[r] * b).sum();
    }
    for c in 0..k {
        let p = (c..k).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
        if a[p][c].abs() < 1e-12 {
            return None;
        }
        a.swap(c, p);
        for r in 0..k {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=k {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    let w: Vec<f64> = (0..k).map(|r| a[r][k] / a[r][r]).collect();
    let residual = rows
        .iter()
        .zip(&rhs)
        .map(|(row, b)| (row.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() - b).abs())
        .fold(0.0f64, f64::max);
    (residual < 1e-9).then_some(w)
}

fn subsets(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        subsets(n, k, i + 1, cur, out);
        cur.pop();
    }
}

/// Largest `f0` mean over all supports of at most `m + 1` points that
/// reproduce the constraint means; `None` when no support does.
pub fn brute_force_best(inst: &Instance) -> Option<f64> {
    let n = inst.points.len();
    let m = inst.points[0].len() - 1;
    let all: Vec<usize> = (0..n).collect();
    let target = means(&inst.points, &all, &inst.weights);
    let mut best: Option<f64> = None;
    for k in 1..=(m + 1).min(n) {
        let mut sets = Vec::new();
        subsets(n, k, 0, &mut Vec::new(), &mut sets);
        for idx in sets {
            if let Some(w) = fit(&inst.points, &idx, &target) {
                if w.iter().all(|v| *v >= -1e-12) {
                    let f0 = means(&inst.points, &idx, &w)[0];
                    best = Some(best.map_or(f0, |b: f64| b.max(f0)));
                }
            }
        }
    }
    best
}

/// Random smooth expression in `x` and `y`, finite on `[-1, 1]²`.
pub fn random_expr(rng: &mut ChaCha8Rng, depth: usize) -> Expr {
    if depth == 0 || rng.random_bool(0.2) {
        return match rng.random_range(0..3) {
            0 => Expr::Const(rng.random_range(-200i32..200) as f64 / 100.0),
            1 => expr::var("x"),
            _ => expr::var("y"),
        };
    }
    let sub = |rng: &mut ChaCha8Rng| random_expr(rng, depth - 1);
    match rng.random_range(0..10) {
        0 => expr::add(sub(rng), sub(rng)),
        1 => expr::sub(sub(rng), sub(rng)),
        2 => expr::mul(sub(rng), sub(rng)),
        3 => {
            let (a, b) = (sub(rng), sub(rng));
            expr::div(a, expr::add(Expr::Const(2.0), expr::call(Func::Sin, vec![b])))
        }
        4 => expr::pow(sub(rng), Expr::Const(rng.random_range(2..4) as f64)),
        5 => expr::call(Func::Sin, vec![sub(rng)]),
        6 => expr::call(Func::Cos, vec![sub(rng)]),
        7 => expr::call(Func::Tanh, vec![sub(rng)]),
        8 => expr::call(Func::Exp, vec![expr::call(Func::Tanh, vec![sub(rng)])]),
        _ => expr::call(Func::Log, vec![expr::add(Expr::Const(1.0), expr::pow(sub(rng), Expr::Const(2.0)))]),
    }
}
