//! Dense two-phase simplex over the general row form.
//!
//! The solver shifts lower-bounded variables to the origin, splits genuinely
//! free variables, scales every row to unit magnitude, and runs a tableau
//! simplex with Dantzig pricing that falls back to Bland's rule under
//! degenerate stalling. Singleton rows that merely bound a variable from
//! below are folded into the variable shift instead of occupying a tableau
//! row, unless duals for every original row were requested.

use super::{check_feasible, LinearProgram, LpError, LpSolution, LpStatus, Relation, Sense};
use crate::tol::TAU_FEAS;

pub(crate) struct Outcome {
    pub solution: LpSolution,
    pub duals: Option<Vec<f64>>,
}

/// Reduced cost threshold for entering the basis.
const EPS_ENTER: f64 = 1e-9;
/// Minimum pivot magnitude accepted by the ratio test.
const EPS_PIVOT: f64 = 1e-9;
/// Consecutive non-improving pivots before switching to Bland's rule.
const STALL_LIMIT: usize = 500;
/// Phase-1 objective above this value means infeasible (rows are unit-scaled).
const PHASE1_TOL: f64 = 1e-8;

pub(crate) fn solve(lp: &LinearProgram, with_duals: bool) -> Result<Outcome, LpError> {
    lp.validate()?;
    match run(lp, with_duals, false) {
        Ok(outcome) => {
            if let Some(violation) = post_violation(lp, &outcome) {
                // One retry in safe mode (Bland's rule throughout) before
                // reporting a numerical failure.
                let retry = run(lp, with_duals, true)?;
                match post_violation(lp, &retry) {
                    None => Ok(retry),
                    Some(v) => Err(LpError::Numerical {
                        violation: v.max(violation),
                    }),
                }
            } else {
                Ok(outcome)
            }
        }
        Err(e) => Err(e),
    }
}

/// Returns the feasibility violation when an optimal claim fails the
/// post-check, `None` when the outcome is acceptable.
fn post_violation(lp: &LinearProgram, outcome: &Outcome) -> Option<f64> {
    if outcome.solution.status != LpStatus::Optimal {
        return None;
    }
    let report = check_feasible(lp, &outcome.solution.x).ok()?;
    if report.max_violation > TAU_FEAS {
        Some(report.max_violation)
    } else {
        None
    }
}

struct ColInfo {
    var: usize,
    sign: f64,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    /// Phase-1 reduced cost row (artificial sum), rhs in the last slot.
    cost1: Vec<f64>,
    /// Phase-2 reduced cost row, rhs in the last slot.
    cost2: Vec<f64>,
    basis: Vec<usize>,
    enterable: Vec<bool>,
    ncols: usize,
}

impl Tableau {
    fn rhs(&self, row: usize) -> f64 {
        self.rows[row][self.ncols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.rows[row][col];
        debug_assert!(piv.abs() > 0.0);
        let inv = 1.0 / piv;
        for v in self.rows[row].iter_mut() {
            *v *= inv;
        }
        self.rows[row][col] = 1.0;
        let pivot_row = std::mem::take(&mut self.rows[row]);
        for (i, r) in self.rows.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let factor = r[col];
            if factor.abs() > 1e-13 {
                for (dst, src) in r.iter_mut().zip(&pivot_row) {
                    *dst -= factor * src;
                }
                r[col] = 0.0;
            }
        }
        for costs in [&mut self.cost1, &mut self.cost2] {
            let factor = costs[col];
            if factor.abs() > 1e-13 {
                for (dst, src) in costs.iter_mut().zip(&pivot_row) {
                    *dst -= factor * src;
                }
                costs[col] = 0.0;
            }
        }
        self.rows[row] = pivot_row;
        self.basis[row] = col;
    }

    /// Entering column: Dantzig (most negative reduced cost) or Bland
    /// (lowest-index negative). Ties break to the lowest index.
    fn entering(&self, cost: &[f64], bland: bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (j, &r) in cost.iter().enumerate().take(self.ncols) {
            if !self.enterable[j] {
                continue;
            }
            if r < -EPS_ENTER {
                if bland {
                    return Some(j);
                }
                if best.map_or(true, |(_, b)| r < b) {
                    best = Some((j, r));
                }
            }
        }
        best.map(|(j, _)| j)
    }

    /// Classic ratio test. Ties prefer kicking artificials out of the basis,
    /// then the largest pivot magnitude, then the lowest row index.
    fn leaving(&self, col: usize, art_start: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.rows.len() {
            let t = self.rows[i][col];
            if t <= EPS_PIVOT {
                continue;
            }
            let ratio = (self.rhs(i).max(0.0)) / t;
            match best {
                None => best = Some((i, ratio)),
                Some((bi, br)) => {
                    let close = (ratio - br).abs() <= 1e-12 * (1.0 + br.abs());
                    if ratio < br - 1e-12 * (1.0 + br.abs()) {
                        best = Some((i, ratio));
                    } else if close {
                        let cand_art = self.basis[i] >= art_start;
                        let best_art = self.basis[bi] >= art_start;
                        let cand_piv = self.rows[i][col].abs();
                        let best_piv = self.rows[bi][col].abs();
                        if (cand_art && !best_art)
                            || (cand_art == best_art && cand_piv > best_piv + 1e-12)
                        {
                            best = Some((i, br.min(ratio)));
                        }
                    }
                }
            }
        }
        best.map(|(i, _)| i)
    }
}

fn run(lp: &LinearProgram, with_duals: bool, safe_mode: bool) -> Result<Outcome, LpError> {
    let n = lp.n_vars;

    // Internal sense is minimization.
    let c_int: Vec<f64> = match (&lp.cost, lp.sense) {
        (Some(c), Sense::Minimize) => c.clone(),
        (Some(c), Sense::Maximize) => c.iter().map(|v| -v).collect(),
        (None, _) => vec![0.0; n],
    };

    // Presolve: fold singleton lower-bound rows into variable shifts.
    let mut lower: Vec<Option<f64>> = vec![None; n];
    let mut kept: Vec<usize> = Vec::with_capacity(lp.constraints.len());
    for (idx, c) in lp.constraints.iter().enumerate() {
        let nz: Vec<usize> = (0..n).filter(|&i| c.row[i] != 0.0).collect();
        if nz.is_empty() {
            let ok = match c.rel {
                Relation::Le => c.rhs >= -TAU_FEAS,
                Relation::Ge => c.rhs <= TAU_FEAS,
                Relation::Eq => c.rhs.abs() <= TAU_FEAS,
            };
            if ok {
                continue;
            }
            return Ok(infeasible());
        }
        if !with_duals && nz.len() == 1 {
            let i = nz[0];
            let a = c.row[i];
            let bound = match (c.rel, a > 0.0) {
                (Relation::Ge, true) | (Relation::Le, false) => Some(c.rhs / a),
                _ => None,
            };
            if let Some(b) = bound {
                lower[i] = Some(lower[i].map_or(b, |prev: f64| prev.max(b)));
                continue;
            }
        }
        kept.push(idx);
    }

    // Structural columns: shifted single column for lower-bounded variables,
    // a positive/negative pair for free ones.
    let shift: Vec<f64> = lower.iter().map(|l| l.unwrap_or(0.0)).collect();
    let mut cols: Vec<ColInfo> = Vec::with_capacity(n + 4);
    let mut var_cols: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        var_cols[i].push(cols.len());
        cols.push(ColInfo { var: i, sign: 1.0 });
        if lower[i].is_none() {
            var_cols[i].push(cols.len());
            cols.push(ColInfo { var: i, sign: -1.0 });
        }
    }
    let ns = cols.len();
    let m = kept.len();

    // Row assembly: scale to unit magnitude, then orient so rhs >= 0.
    let mut rows_a: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut rows_b: Vec<f64> = Vec::with_capacity(m);
    let mut rows_rel: Vec<Relation> = Vec::with_capacity(m);
    let mut row_scale: Vec<f64> = Vec::with_capacity(m);
    let mut row_flip: Vec<bool> = Vec::with_capacity(m);
    for &idx in &kept {
        let c = &lp.constraints[idx];
        let mut a: Vec<f64> = (0..ns).map(|j| c.row[cols[j].var] * cols[j].sign).collect();
        let mut b = c.rhs - (0..n).map(|i| c.row[i] * shift[i]).sum::<f64>();
        let scale = a.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
        debug_assert!(scale > 0.0);
        for v in a.iter_mut() {
            *v /= scale;
        }
        b /= scale;
        let mut rel = c.rel;
        let flip = b < 0.0;
        if flip {
            for v in a.iter_mut() {
                *v = -*v;
            }
            b = -b;
            rel = match rel {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
        }
        rows_a.push(a);
        rows_b.push(b);
        rows_rel.push(rel);
        row_scale.push(scale);
        row_flip.push(flip);
    }

    // Column layout: structural, slack/surplus, artificials, then rhs.
    let mut slack_col: Vec<Option<usize>> = vec![None; m];
    let mut extra = 0usize;
    for (i, rel) in rows_rel.iter().enumerate() {
        if !matches!(rel, Relation::Eq) {
            slack_col[i] = Some(ns + extra);
            extra += 1;
        }
    }
    let art_start = ns + extra;
    let mut art_col: Vec<Option<usize>> = vec![None; m];
    let mut n_art = 0usize;
    for (i, rel) in rows_rel.iter().enumerate() {
        if matches!(rel, Relation::Ge | Relation::Eq) {
            art_col[i] = Some(art_start + n_art);
            n_art += 1;
        }
    }
    let ncols = art_start + n_art;

    let mut tab = Tableau {
        rows: Vec::with_capacity(m),
        cost1: vec![0.0; ncols + 1],
        cost2: vec![0.0; ncols + 1],
        basis: vec![0; m],
        enterable: vec![true; ncols],
        ncols,
    };
    for j in art_start..ncols {
        tab.enterable[j] = false;
    }

    for i in 0..m {
        let mut row = vec![0.0; ncols + 1];
        row[..ns].copy_from_slice(&rows_a[i]);
        row[ncols] = rows_b[i];
        match rows_rel[i] {
            Relation::Le => {
                let s = slack_col[i].unwrap();
                row[s] = 1.0;
                tab.basis[i] = s;
            }
            Relation::Ge => {
                row[slack_col[i].unwrap()] = -1.0;
                let a = art_col[i].unwrap();
                row[a] = 1.0;
                tab.basis[i] = a;
            }
            Relation::Eq => {
                let a = art_col[i].unwrap();
                row[a] = 1.0;
                tab.basis[i] = a;
            }
        }
        tab.rows.push(row);
    }

    // Phase-2 costs on structural columns; the initial basis columns all cost
    // zero, so the row starts already priced. The final objective is
    // recomputed from x directly, so the constant from shifting is dropped.
    for j in 0..ns {
        tab.cost2[j] = c_int[cols[j].var] * cols[j].sign;
    }

    // Phase-1 costs: sum of artificials, priced out against the initial basis.
    for (i, art) in art_col.iter().enumerate() {
        if let Some(a) = art {
            debug_assert_eq!(tab.basis[i], *a);
            for j in 0..=ncols {
                tab.cost1[j] -= tab.rows[i][j];
            }
        }
    }
    for a in art_col.iter().flatten() {
        tab.cost1[*a] = 0.0;
    }

    let pivot_limit = 20 * (m + ncols) + 5_000;

    match run_phase(&mut tab, true, pivot_limit, safe_mode)? {
        PhaseEnd::Done => {}
        PhaseEnd::Unbounded => {
            // Phase 1 minimizes a sum of nonnegative variables; it cannot be
            // unbounded. Treat as a numerical failure.
            return Err(LpError::Numerical { violation: f64::NAN });
        }
    }
    let phase1_obj = -tab.cost1[ncols];
    if phase1_obj > PHASE1_TOL * (1.0 + rows_b_norm(&rows_b)) {
        return Ok(infeasible());
    }

    // Drive leftover artificials out of the basis where possible.
    for i in 0..m {
        if tab.basis[i] >= art_start {
            if let Some(col) = (0..art_start).find(|&j| tab.rows[i][j].abs() > 1e-7) {
                tab.pivot(i, col);
            }
        }
    }

    match run_phase(&mut tab, false, pivot_limit, safe_mode)? {
        PhaseEnd::Done => {}
        PhaseEnd::Unbounded => {
            let objective = match lp.sense {
                Sense::Minimize => f64::NEG_INFINITY,
                Sense::Maximize => f64::INFINITY,
            };
            return Ok(Outcome {
                solution: LpSolution {
                    status: LpStatus::Unbounded,
                    x: Vec::new(),
                    objective,
                },
                duals: None,
            });
        }
    }

    // Recover the original variables.
    let mut z = vec![0.0; ncols];
    for i in 0..m {
        z[tab.basis[i]] = tab.rhs(i).max(0.0);
    }
    let mut x = shift.clone();
    for (j, info) in cols.iter().enumerate() {
        x[info.var] += info.sign * z[j];
    }
    for v in x.iter_mut() {
        if v.abs() < 1e-11 {
            *v = 0.0;
        }
    }
    let objective = lp.objective_value(&x);

    let duals = if with_duals {
        Some(recover_duals(
            lp, &tab, &kept, &slack_col, &art_col, &rows_rel, &row_scale, &row_flip,
        ))
    } else {
        None
    };

    Ok(Outcome {
        solution: LpSolution {
            status: LpStatus::Optimal,
            x,
            objective,
        },
        duals,
    })
}

fn rows_b_norm(b: &[f64]) -> f64 {
    b.iter().fold(0.0f64, |mx, v| mx.max(v.abs()))
}

fn infeasible() -> Outcome {
    Outcome {
        solution: LpSolution {
            status: LpStatus::Infeasible,
            x: Vec::new(),
            objective: f64::NAN,
        },
        duals: None,
    }
}

enum PhaseEnd {
    Done,
    Unbounded,
}

fn run_phase(
    tab: &mut Tableau,
    phase1: bool,
    pivot_limit: usize,
    safe_mode: bool,
) -> Result<PhaseEnd, LpError> {
    let art_start = tab
        .enterable
        .iter()
        .position(|&e| !e)
        .unwrap_or(tab.ncols);
    let mut pivots = 0usize;
    let mut stall = 0usize;
    let mut last_obj = current_obj(tab, phase1);
    // Columns whose ratio test found no pivot above the magnitude floor. In
    // phase 1 that cannot mean unbounded (the objective is nonnegative), so
    // such columns sit out until the next successful pivot reshapes them.
    let mut blocked: Vec<usize> = Vec::new();
    let end = loop {
        let bland = safe_mode || stall > STALL_LIMIT;
        let cost = if phase1 { &tab.cost1 } else { &tab.cost2 };
        let Some(col) = tab.entering(cost, bland) else {
            break PhaseEnd::Done;
        };
        let Some(row) = tab.leaving(col, art_start) else {
            if phase1 {
                tab.enterable[col] = false;
                blocked.push(col);
                continue;
            }
            break PhaseEnd::Unbounded;
        };
        tab.pivot(row, col);
        for &c in &blocked {
            tab.enterable[c] = true;
        }
        blocked.clear();
        pivots += 1;
        if pivots > pivot_limit {
            return Err(LpError::PivotLimit { limit: pivot_limit });
        }
        let obj = current_obj(tab, phase1);
        if obj < last_obj - 1e-12 * (1.0 + last_obj.abs()) {
            stall = 0;
            last_obj = obj;
        } else {
            stall += 1;
        }
    };
    for &c in &blocked {
        tab.enterable[c] = true;
    }
    Ok(end)
}

fn current_obj(tab: &Tableau, phase1: bool) -> f64 {
    if phase1 {
        -tab.cost1[tab.ncols]
    } else {
        -tab.cost2[tab.ncols]
    }
}

/// Reads dual multipliers for every original row off the final tableau.
///
/// In with-duals mode no rows are presolved away, so `kept` covers all rows.
/// For the internal minimization, the multiplier of row `i` is read from the
/// reduced cost of its slack, surplus, or artificial column, then unwound
/// through the rhs orientation flip, the row scaling, and the sense negation.
#[allow(clippy::too_many_arguments)]
fn recover_duals(
    lp: &LinearProgram,
    tab: &Tableau,
    kept: &[usize],
    slack_col: &[Option<usize>],
    art_col: &[Option<usize>],
    rows_rel: &[Relation],
    row_scale: &[f64],
    row_flip: &[bool],
) -> Vec<f64> {
    let mut y = vec![0.0; lp.constraints.len()];
    for (i, &orig) in kept.iter().enumerate() {
        let pi = match rows_rel[i] {
            Relation::Le => -tab.cost2[slack_col[i].unwrap()],
            Relation::Ge => tab.cost2[slack_col[i].unwrap()],
            Relation::Eq => -tab.cost2[art_col[i].unwrap()],
        };
        let mut v = pi;
        if row_flip[i] {
            v = -v;
        }
        v /= row_scale[i];
        if lp.sense == Sense::Maximize {
            v = -v;
        }
        y[orig] = v;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::{solve_lp, solve_lp_with_duals};

    fn box_lp(sense: Sense, cost: Vec<f64>) -> LinearProgram {
        let mut lp = LinearProgram::new(2, sense);
        lp.push_constraint(vec![1.0, 0.0], Relation::Le, 1.0);
        lp.push_constraint(vec![0.0, 1.0], Relation::Le, 1.0);
        lp.push_constraint(vec![1.0, 0.0], Relation::Ge, 0.0);
        lp.push_constraint(vec![0.0, 1.0], Relation::Ge, 0.0);
        lp.cost = Some(cost);
        lp
    }

    #[test]
    fn maximizes_over_the_box() {
        let lp = box_lp(Sense::Maximize, vec![1.0, 1.0]);
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.objective - 2.0).abs() < 1e-9);
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
        assert!((sol.x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn minimizes_with_equality() {
        // min x + y  s.t.  x + y = 1, x,y >= 0
        let mut lp = LinearProgram::new(2, Sense::Minimize);
        lp.push_constraint(vec![1.0, 1.0], Relation::Eq, 1.0);
        lp.push_constraint(vec![1.0, 0.0], Relation::Ge, 0.0);
        lp.push_constraint(vec![0.0, 1.0], Relation::Ge, 0.0);
        lp.cost = Some(vec![1.0, 1.0]);
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible() {
        let mut lp = LinearProgram::new(1, Sense::Minimize);
        lp.push_constraint(vec![1.0], Relation::Ge, 2.0);
        lp.push_constraint(vec![1.0], Relation::Le, 1.0);
        lp.cost = Some(vec![1.0]);
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        let mut lp = LinearProgram::new(1, Sense::Maximize);
        lp.push_constraint(vec![1.0], Relation::Ge, 0.0);
        lp.cost = Some(vec![1.0]);
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Unbounded);
        assert_eq!(sol.objective, f64::INFINITY);
    }

    #[test]
    fn handles_free_variables() {
        // min x  s.t.  x >= -3 via a non-singleton pair, x free otherwise.
        let mut lp = LinearProgram::new(2, Sense::Minimize);
        lp.push_constraint(vec![1.0, 1.0], Relation::Ge, -3.0);
        lp.push_constraint(vec![1.0, -1.0], Relation::Ge, -3.0);
        lp.cost = Some(vec![1.0, 0.0]);
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.objective + 3.0).abs() < 1e-9);
    }

    #[test]
    fn feasibility_problem_without_cost() {
        let mut lp = LinearProgram::new(2, Sense::Minimize);
        lp.push_constraint(vec![1.0, 1.0], Relation::Eq, 2.0);
        lp.push_constraint(vec![1.0, -1.0], Relation::Le, 0.5);
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_eq!(sol.objective, 0.0);
        assert!(check_feasible(&lp, &sol.x).unwrap().feasible);
    }

    #[test]
    fn duals_certify_box_optimum() {
        let lp = box_lp(Sense::Maximize, vec![1.0, 1.0]);
        let (sol, duals) = solve_lp_with_duals(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        let y = duals.unwrap();
        let cert = crate::lp::duality_certificate(&lp, &sol.x, &y).unwrap();
        assert!(cert.dual_feasible, "residual {}", cert.dual_residual);
        assert!(cert.primal_feasible);
        assert!(cert.gap.abs() < 1e-9);
    }
}
