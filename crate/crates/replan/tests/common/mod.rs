//! Shared generators and independent oracles for the integration suites.
//!
//! Everything here recomputes expected values by a route different from the
//! library code under test: exhaustive enumeration, sorting, or grid search.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use replan::lp::{solve_square, LinearProgram, Relation, Sense};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random feasible, bounded program: a `[-bound, bound]` box plus
/// `extra_rows` random halfspaces kept feasible around an interior anchor
/// point. Returns the program and the anchor.
pub fn random_bounded_lp(
    rng: &mut ChaCha8Rng,
    n: usize,
    extra_rows: usize,
    bound: f64,
) -> (LinearProgram, Vec<f64>) {
    let mut lp = LinearProgram::new(n, Sense::Maximize);
    for i in 0..n {
        let mut row = vec![0.0; n];
        row[i] = 1.0;
        lp.push_constraint(row.clone(), Relation::Le, bound);
        lp.push_constraint(row, Relation::Ge, -bound);
    }
    let anchor: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(-0.5 * bound..0.5 * bound))
        .collect();
    for _ in 0..extra_rows {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if row.iter().all(|v| v.abs() < 1e-3) {
            continue;
        }
        let activity: f64 = row.iter().zip(&anchor).map(|(a, z)| a * z).sum();
        let margin = rng.gen_range(0.05..1.5);
        lp.push_constraint(row, Relation::Le, activity + margin);
    }
    lp.cost = Some((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    (lp, anchor)
}

/// Best objective over explicitly enumerated vertices; `None` when the
/// program has no vertex (never the case for the generators above).
pub fn vertex_optimum(lp: &LinearProgram) -> Option<f64> {
    let vertices = replan::lp::enumerate_vertices(lp).expect("enumeration within caps");
    let cost = lp.cost.as_ref().expect("cost required");
    let objs = vertices.iter().map(|v| {
        cost.iter()
            .zip(v)
            .map(|(c, x)| c * x)
            .sum::<f64>()
    });
    match lp.sense {
        Sense::Maximize => objs.fold(None, |acc: Option<f64>, o| Some(acc.map_or(o, |a| a.max(o)))),
        Sense::Minimize => objs.fold(None, |acc: Option<f64>, o| Some(acc.map_or(o, |a| a.min(o)))),
    }
}

/// L1 distance between a point and a list of observations.
pub fn l1_loss(x: &[f64], observations: &[Vec<f64>]) -> f64 {
    observations
        .iter()
        .map(|x0| x.iter().zip(x0).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum()
}

/// Brute-force single-support projection oracle.
///
/// For every constraint j, minimizes the total L1 distance to the
/// observations over the slice `{x : row_j . x = rhs_j} ∩ Ω` by enumerating
/// candidate active sets: each candidate point solves a square system built
/// from `n` rows drawn from the constraint rows plus the axis planes
/// `x_i = x0_i` of each observation. Returns `(best_j, best_loss)`.
pub fn projection_oracle(lp: &LinearProgram, observations: &[Vec<f64>]) -> Option<(usize, f64)> {
    let n = lp.n_vars;
    let m = lp.constraints.len();
    // Candidate planes: all constraint rows (as equalities) and, per
    // observation, the axis-aligned planes through it.
    let mut planes: Vec<(Vec<f64>, f64)> = lp
        .constraints
        .iter()
        .map(|c| (c.row.clone(), c.rhs))
        .collect();
    for x0 in observations {
        for i in 0..n {
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            planes.push((row, x0[i]));
        }
    }

    let mut best: Option<(usize, f64)> = None;
    for j in 0..m {
        let mut best_j: Option<f64> = None;
        // Active sets always include plane j; choose the remaining n-1.
        let others: Vec<usize> = (0..planes.len()).filter(|&p| p != j).collect();
        let mut subset: Vec<usize> = (0..n.saturating_sub(1)).collect();
        if n == 1 {
            if let Some(x) = solve_with(&planes, &[j], n) {
                if feasible_on_slice(lp, j, &x) {
                    best_j = Some(l1_loss(&x, observations));
                }
            }
        } else {
            loop {
                let mut chosen = vec![j];
                chosen.extend(subset.iter().map(|&k| others[k]));
                if let Some(x) = solve_with(&planes, &chosen, n) {
                    if feasible_on_slice(lp, j, &x) {
                        let loss = l1_loss(&x, observations);
                        if best_j.map_or(true, |b| loss < b) {
                            best_j = Some(loss);
                        }
                    }
                }
                if !advance(&mut subset, others.len()) {
                    break;
                }
            }
        }
        if let Some(loss) = best_j {
            if best.map_or(true, |(_, b)| loss < b - 1e-12) {
                best = Some((j, loss));
            }
        }
    }
    best
}

fn solve_with(planes: &[(Vec<f64>, f64)], chosen: &[usize], n: usize) -> Option<Vec<f64>> {
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for (k, &idx) in chosen.iter().enumerate() {
        a[k * n..(k + 1) * n].copy_from_slice(&planes[idx].0);
        b[k] = planes[idx].1;
    }
    solve_square(&a, &b, n)
}

/// Feasible for the whole program, with row `j` held at equality.
fn feasible_on_slice(lp: &LinearProgram, j: usize, x: &[f64]) -> bool {
    let tol = 1e-7;
    let cj = &lp.constraints[j];
    let lhs: f64 = cj.row.iter().zip(x).map(|(a, v)| a * v).sum();
    if (lhs - cj.rhs).abs() > tol {
        return false;
    }
    lp.constraints.iter().all(|c| {
        let v: f64 = c.row.iter().zip(x).map(|(a, u)| a * u).sum();
        match c.rel {
            Relation::Le => v <= c.rhs + tol,
            Relation::Ge => v >= c.rhs - tol,
            Relation::Eq => (v - c.rhs).abs() <= tol,
        }
    })
}

fn advance(subset: &mut [usize], m: usize) -> bool {
    let k = subset.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if subset[i] < i + m - k {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// CVaR by brute-force grid search over the scalar in the Rockafellar-Uryasev
/// form: evaluates `g + mean excess / (1 - alpha)` at every dose breakpoint
/// (the minimum of the piecewise-linear objective sits at one).
pub fn cvar_grid_oracle(doses: &[f64], alpha: f64) -> f64 {
    let n = doses.len() as f64;
    let denom = (1.0 - alpha) * n;
    let eval = |g: f64| -> f64 {
        g + doses.iter().map(|d| (d - g).max(0.0)).sum::<f64>() / denom
    };
    doses
        .iter()
        .map(|&g| eval(g))
        .fold(f64::INFINITY, f64::min)
}

/// Lower-tail counterpart of [`cvar_grid_oracle`]: maximizes
/// `g - mean shortfall / (1 - alpha)` over the dose breakpoints.
pub fn lower_cvar_grid_oracle(doses: &[f64], alpha: f64) -> f64 {
    let n = doses.len() as f64;
    let denom = (1.0 - alpha) * n;
    let eval = |g: f64| -> f64 {
        g - doses.iter().map(|d| (g - d).max(0.0)).sum::<f64>() / denom
    };
    doses
        .iter()
        .map(|&g| eval(g))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Dose-at-volume by sorting: minimum dose among the `ceil(fraction * N)`
/// hottest voxels.
pub fn dose_at_volume_oracle(doses: &[f64], fraction: f64) -> f64 {
    let mut sorted = doses.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = ((fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Checks a candidate (cost, x, dual, b_hat) tuple against the constraints of
/// the rhs-learning model for candidate set `improvable`: dual weights form a
/// distribution over the candidates, the cost matches the dual combination of
/// rows (in `<=` orientation), strong duality holds against the learned
/// right-hand sides, `x` satisfies every non-candidate row, supported rows
/// bind, and learned bounds stay inside their windows.
#[allow(clippy::too_many_arguments)]
pub fn tuple_feasible(
    lp: &LinearProgram,
    improvable: &[usize],
    b_lower: &[f64],
    b_upper: &[f64],
    cost: &[f64],
    x: &[f64],
    dual: &[f64],
    b_hat: &[f64],
) -> bool {
    let tol = 1e-7;
    let m = lp.n_constraints();
    if dual.len() != m || cost.len() != lp.n_vars || x.len() != lp.n_vars {
        return false;
    }
    let sign = |rel: Relation| if rel == Relation::Ge { -1.0 } else { 1.0 };
    // Learned rhs per row: window value for candidates, original otherwise.
    let rhs_of = |k: usize| -> f64 {
        match improvable.iter().position(|&j| j == k) {
            Some(pos) => b_hat[pos],
            None => lp.constraints[k].rhs,
        }
    };
    // Distribution over candidates, zero elsewhere.
    let mut total = 0.0;
    for (k, &y) in dual.iter().enumerate() {
        if y < -tol {
            return false;
        }
        if improvable.contains(&k) {
            total += y;
        } else if y.abs() > tol {
            return false;
        }
    }
    if (total - 1.0).abs() > tol {
        return false;
    }
    // Cost equals the dual combination of canonical rows.
    for (i, &ci) in cost.iter().enumerate().take(lp.n_vars) {
        let combined: f64 = (0..m)
            .map(|k| dual[k] * sign(lp.constraints[k].rel) * lp.constraints[k].row[i])
            .sum();
        if (combined - ci).abs() > tol {
            return false;
        }
    }
    // Strong duality against the learned right-hand sides.
    let cx: f64 = cost.iter().zip(x).map(|(c, v)| c * v).sum();
    let by: f64 = (0..m)
        .map(|k| dual[k] * sign(lp.constraints[k].rel) * rhs_of(k))
        .sum();
    if (cx - by).abs() > tol * (1.0 + cx.abs()) {
        return false;
    }
    // x feasible for all non-candidate rows; supported candidate rows bind.
    for (k, c) in lp.constraints.iter().enumerate() {
        let lhs: f64 = c.row.iter().zip(x).map(|(a, v)| a * v).sum();
        if improvable.contains(&k) {
            if dual[k] > tol && (lhs - rhs_of(k)).abs() > tol {
                return false;
            }
        } else {
            let ok = match c.rel {
                Relation::Le => lhs <= c.rhs + tol,
                Relation::Ge => lhs >= c.rhs - tol,
                Relation::Eq => (lhs - c.rhs).abs() <= tol,
            };
            if !ok {
                return false;
            }
        }
    }
    // Learned bounds inside their windows.
    for (pos, _) in improvable.iter().enumerate() {
        if b_hat[pos] < b_lower[pos] - tol || b_hat[pos] > b_upper[pos] + tol {
            return false;
        }
    }
    true
}
