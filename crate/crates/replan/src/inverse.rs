//! Inverse linear optimization: learn costs and right-hand sides that
//! rationalize an observed solution, or improve it along a chosen constraint.
//!
//! Three entry points build on one another:
//!
//! * [`solve_il`] finds a cost vector making the observations (near) optimal
//!   for a fixed feasible set, by enumerating single binding constraints.
//! * [`solve_mil`] improves one constraint's right-hand side, trading distance
//!   from the observation against movement of the learned bound.
//! * [`solve_ilg`] runs [`solve_mil`] over a candidate set and keeps the best.
//!
//! Every result carries a dual certificate; [`verify_improvement`] re-checks
//! it and the guarantee that the learned solution performs at least as well
//! as the observation under the learned cost.

use serde::{Deserialize, Serialize};

use crate::lp::{
    solve_lp, Constraint, LinearProgram, LpError, LpStatus, Relation, Sense,
};
use crate::tol::{opt_tol, TAU_FEAS};

/// Distance measure between a learned solution and an observation.
///
/// Both choices keep every subproblem a linear program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// Sum of absolute coordinate differences.
    L1,
    /// Largest absolute coordinate difference.
    Linf,
}

impl Norm {
    /// Evaluates the distance between two points of equal dimension.
    pub fn distance(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Norm::L1 => x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum(),
            Norm::Linf => x
                .iter()
                .zip(y)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        }
    }
}

/// Which constraints may move, how far, and in which direction.
///
/// `b_lower`, `b_upper`, and `direction` run parallel to `improvable`.
/// `direction[k]` is the sign of the learned bound in the objective: `-1`
/// rewards growing `b_hat` (relaxing a `<=` row), `+1` rewards shrinking it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSpec {
    pub improvable: Vec<usize>,
    pub b_lower: Vec<f64>,
    pub b_upper: Vec<f64>,
    pub omega: f64,
    pub norm: Norm,
    pub direction: Vec<i8>,
}

impl ImprovementSpec {
    /// Convenience constructor for a single movable constraint.
    pub fn single(j: usize, b_lower: f64, b_upper: f64, omega: f64, norm: Norm, direction: i8) -> Self {
        ImprovementSpec {
            improvable: vec![j],
            b_lower: vec![b_lower],
            b_upper: vec![b_upper],
            omega,
            norm,
            direction: vec![direction],
        }
    }

    /// Checks internal consistency and consistency with `lp`.
    pub fn validate(&self, lp: &LinearProgram) -> Result<(), InverseError> {
        if self.improvable.is_empty() {
            return Err(InverseError::EmptyImprovable);
        }
        let k = self.improvable.len();
        if self.b_lower.len() != k || self.b_upper.len() != k || self.direction.len() != k {
            return Err(InverseError::SpecLengthMismatch);
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(InverseError::OmegaRange { omega: self.omega });
        }
        let m = lp.n_constraints();
        for (pos, &j) in self.improvable.iter().enumerate() {
            if j >= m {
                return Err(InverseError::RowOutOfRange { row: j, rows: m });
            }
            if self.improvable[..pos].contains(&j) {
                return Err(InverseError::DuplicateRow { row: j });
            }
            let (lo, hi) = (self.b_lower[pos], self.b_upper[pos]);
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(InverseError::BoundOrder { row: j });
            }
            let b0 = lp.constraints[j].rhs;
            if b0 < lo - TAU_FEAS || b0 > hi + TAU_FEAS {
                return Err(InverseError::OriginalRhsOutsideBounds { row: j });
            }
            if self.direction[pos] != 1 && self.direction[pos] != -1 {
                return Err(InverseError::BadDirection { row: j });
            }
        }
        Ok(())
    }

    fn position_of(&self, j: usize) -> Option<usize> {
        self.improvable.iter().position(|&k| k == j)
    }
}

/// A learned (cost, solution, dual, bound) tuple with its certificate data.
///
/// `b_hat` runs parallel to `improvable`; rows other than `binding_index`
/// keep their original right-hand sides. `dual_rhs` is the right-hand-side
/// vector of the learned problem in the frame of `cost`, so that
/// `cost . x = dual_rhs . dual` certifies bindingness without the original
/// program at hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseSolution {
    pub cost: Vec<f64>,
    pub x: Vec<f64>,
    pub dual: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub loss: f64,
    pub binding_index: usize,
    pub improvable: Vec<usize>,
    pub dual_rhs: Vec<f64>,
}

/// Outcome of [`verify_improvement`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementCheck {
    pub holds: bool,
    pub margin: f64,
}

/// Errors from the inverse solvers.
#[derive(Debug, thiserror::Error)]
pub enum InverseError {
    #[error("at least one observation is required")]
    EmptyObservations,
    #[error("observation has {got} coordinates, expected {expected}")]
    ObservationLength { got: usize, expected: usize },
    #[error("improvable set must be non-empty")]
    EmptyImprovable,
    #[error("improvable, b_lower, b_upper, and direction must have equal length")]
    SpecLengthMismatch,
    #[error("omega must lie in [0, 1], got {omega}")]
    OmegaRange { omega: f64 },
    #[error("constraint {row} out of range for a program with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("constraint {row} listed twice in the improvable set")]
    DuplicateRow { row: usize },
    #[error("bounds for constraint {row} must be finite with b_lower <= b_upper")]
    BoundOrder { row: usize },
    #[error("original rhs of constraint {row} lies outside [b_lower, b_upper]")]
    OriginalRhsOutsideBounds { row: usize },
    #[error("direction for constraint {row} must be +1 or -1")]
    BadDirection { row: usize },
    #[error("constraint {row} is not in the improvable set")]
    NotImprovable { row: usize },
    #[error("feasible set is empty or no constraint can bind")]
    NoBindingConstraint,
    #[error("improvement subproblem for constraint {row} is infeasible; bounds too tight")]
    SubproblemInfeasible { row: usize },
    #[error("unexpected unbounded subproblem for constraint {row}")]
    SubproblemUnbounded { row: usize },
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Sign that turns a row into `<=` form: `-1` for `>=` rows, else `+1`.
fn canonical_sign(rel: Relation) -> f64 {
    match rel {
        Relation::Ge => -1.0,
        Relation::Le | Relation::Eq => 1.0,
    }
}

/// Right-hand sides of all rows in `<=` form.
fn canonical_rhs(lp: &LinearProgram) -> Vec<f64> {
    lp.constraints
        .iter()
        .map(|c| canonical_sign(c.rel) * c.rhs)
        .collect()
}

/// Appends distance constraints `t >= |x - observation|` to `rows`, with the
/// auxiliary block starting at column `t_start` of a `total`-column program.
/// Returns the number of auxiliary columns consumed.
fn append_distance_rows(
    rows: &mut Vec<Constraint>,
    total: usize,
    n: usize,
    t_start: usize,
    observation: &[f64],
    norm: Norm,
) -> usize {
    let aux = match norm {
        Norm::L1 => n,
        Norm::Linf => 1,
    };
    for i in 0..n {
        let t_col = match norm {
            Norm::L1 => t_start + i,
            Norm::Linf => t_start,
        };
        let mut up = vec![0.0; total];
        up[i] = 1.0;
        up[t_col] = -1.0;
        rows.push(Constraint { row: up, rel: Relation::Le, rhs: observation[i] });
        let mut down = vec![0.0; total];
        down[i] = -1.0;
        down[t_col] = -1.0;
        rows.push(Constraint { row: down, rel: Relation::Le, rhs: -observation[i] });
    }
    for k in 0..aux {
        let mut pos = vec![0.0; total];
        pos[t_start + k] = 1.0;
        rows.push(Constraint { row: pos, rel: Relation::Ge, rhs: 0.0 });
    }
    aux
}

/// Learns a cost vector under which the observations are as close to optimal
/// as the feasible set allows.
///
/// For each constraint in turn, the observationwise distance loss is
/// minimized over the face where that constraint binds; the constraint with
/// the smallest loss wins, ties going to the lowest index. The returned cost
/// is the binding row oriented so its dual weight is `+1`.
pub fn solve_il(
    lp: &LinearProgram,
    observations: &[Vec<f64>],
    norm: Norm,
) -> Result<InverseSolution, InverseError> {
    lp.validate()?;
    if observations.is_empty() {
        return Err(InverseError::EmptyObservations);
    }
    let n = lp.n_vars;
    for obs in observations {
        if obs.len() != n {
            return Err(InverseError::ObservationLength { got: obs.len(), expected: n });
        }
    }
    let m = lp.n_constraints();
    let mut best: Option<(usize, Vec<f64>, f64)> = None;
    for j in 0..m {
        let aux_per_obs = match norm {
            Norm::L1 => n,
            Norm::Linf => 1,
        };
        let total = n + aux_per_obs * observations.len();
        let mut sub = LinearProgram::new(total, Sense::Minimize);
        for c in &lp.constraints {
            let mut row = vec![0.0; total];
            row[..n].copy_from_slice(&c.row);
            sub.push_constraint(row, c.rel, c.rhs);
        }
        let target = &lp.constraints[j];
        let mut eq = vec![0.0; total];
        eq[..n].copy_from_slice(&target.row);
        sub.push_constraint(eq, Relation::Eq, target.rhs);
        let mut cost = vec![0.0; total];
        let mut t_start = n;
        for obs in observations {
            let used =
                append_distance_rows(&mut sub.constraints, total, n, t_start, obs, norm);
            for k in 0..used {
                cost[t_start + k] = 1.0;
            }
            t_start += used;
        }
        sub.cost = Some(cost);
        let sol = solve_lp(&sub)?;
        if sol.status != LpStatus::Optimal {
            continue;
        }
        let x: Vec<f64> = sol.x[..n].to_vec();
        let loss: f64 = observations.iter().map(|obs| norm.distance(&x, obs)).sum();
        let better = match &best {
            None => true,
            Some((_, _, best_loss)) => loss < best_loss - 1e-12,
        };
        if better {
            best = Some((j, x, loss));
        }
    }
    let (j, x, loss) = best.ok_or(InverseError::NoBindingConstraint)?;
    let sign = canonical_sign(lp.constraints[j].rel);
    let cost: Vec<f64> = lp.constraints[j].row.iter().map(|a| sign * a).collect();
    let mut dual = vec![0.0; m];
    dual[j] = 1.0;
    Ok(InverseSolution {
        cost,
        x,
        dual,
        b_hat: lp.constraints.iter().map(|c| c.rhs).collect(),
        loss,
        binding_index: j,
        improvable: (0..m).collect(),
        dual_rhs: canonical_rhs(lp),
    })
}

/// Improves the right-hand side of constraint `j`, keeping all rows outside
/// `spec.improvable` hard.
///
/// Minimizes `omega * distance(x, x0) + (1 - omega) * direction * b_hat`
/// subject to the kept rows, `a_j . x = b_hat`, and the bound window; among
/// minimizers the one closest to `x0` is returned. The learned cost is
/// `-direction * a_j`, under which the result performs at least as well as
/// `x0` whenever `x0` is feasible and its level on row `j` fits the window.
pub fn solve_mil(
    lp: &LinearProgram,
    x0: &[f64],
    j: usize,
    spec: &ImprovementSpec,
) -> Result<InverseSolution, InverseError> {
    lp.validate()?;
    spec.validate(lp)?;
    let n = lp.n_vars;
    if x0.len() != n {
        return Err(InverseError::ObservationLength { got: x0.len(), expected: n });
    }
    let pos = spec.position_of(j).ok_or(InverseError::NotImprovable { row: j })?;
    let (b_lo, b_hi) = (spec.b_lower[pos], spec.b_upper[pos]);
    let dir = f64::from(spec.direction[pos]);
    let target_row = &lp.constraints[j].row;

    // The observation solves the problem exactly when it fits the window, so
    // a full-weight distance objective never needs a solver call.
    if spec.omega == 1.0 {
        let level: f64 = target_row.iter().zip(x0).map(|(a, v)| a * v).sum();
        if level >= b_lo - TAU_FEAS && level <= b_hi + TAU_FEAS {
            let kept_ok = lp
                .constraints
                .iter()
                .enumerate()
                .filter(|(k, _)| !spec.improvable.contains(k))
                .all(|(_, c)| {
                    let lhs: f64 = c.row.iter().zip(x0).map(|(a, v)| a * v).sum();
                    match c.rel {
                        Relation::Le => lhs <= c.rhs + TAU_FEAS,
                        Relation::Ge => lhs >= c.rhs - TAU_FEAS,
                        Relation::Eq => (lhs - c.rhs).abs() <= TAU_FEAS,
                    }
                });
            if kept_ok {
                return Ok(assemble(lp, spec, j, x0.to_vec(), level.clamp(b_lo, b_hi), 0.0, dir));
            }
        }
    }

    // Columns: x (n), then b_hat, then the distance auxiliaries.
    let aux = match spec.norm {
        Norm::L1 => n,
        Norm::Linf => 1,
    };
    let total = n + 1 + aux;
    let b_col = n;
    let mut sub = LinearProgram::new(total, Sense::Minimize);
    for (k, c) in lp.constraints.iter().enumerate() {
        if spec.improvable.contains(&k) {
            continue;
        }
        let mut row = vec![0.0; total];
        row[..n].copy_from_slice(&c.row);
        sub.push_constraint(row, c.rel, c.rhs);
    }
    let mut eq = vec![0.0; total];
    eq[..n].copy_from_slice(target_row);
    eq[b_col] = -1.0;
    sub.push_constraint(eq, Relation::Eq, 0.0);
    let mut lo_row = vec![0.0; total];
    lo_row[b_col] = 1.0;
    sub.push_constraint(lo_row.clone(), Relation::Ge, b_lo);
    lo_row[b_col] = 1.0;
    sub.push_constraint(lo_row, Relation::Le, b_hi);
    append_distance_rows(&mut sub.constraints, total, n, n + 1, x0, spec.norm);

    let mut stage_one = vec![0.0; total];
    stage_one[b_col] = (1.0 - spec.omega) * dir;
    for k in 0..aux {
        stage_one[n + 1 + k] = spec.omega;
    }
    sub.cost = Some(stage_one.clone());
    let first = solve_lp(&sub)?;
    match first.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(InverseError::SubproblemInfeasible { row: j }),
        LpStatus::Unbounded => return Err(InverseError::SubproblemUnbounded { row: j }),
    }

    // Among minimizers of the stage-one objective, take the point closest to
    // the observation. With no distance weight the learned bound is the same
    // across all minimizers, so it can be pinned exactly; otherwise a small
    // objective budget marks the optimal face.
    if spec.omega == 0.0 {
        let mut pin = vec![0.0; total];
        pin[b_col] = 1.0;
        sub.push_constraint(pin, Relation::Eq, first.x[b_col]);
    } else {
        let budget = first.objective + 1e-9 * (1.0 + first.objective.abs());
        sub.push_constraint(stage_one, Relation::Le, budget);
    }
    let mut stage_two = vec![0.0; total];
    for k in 0..aux {
        stage_two[n + 1 + k] = 1.0;
    }
    sub.cost = Some(stage_two);
    let second = solve_lp(&sub)?;
    let point = if second.status == LpStatus::Optimal { &second } else { &first };
    let x: Vec<f64> = point.x[..n].to_vec();
    let b_hat = point.x[b_col].clamp(b_lo, b_hi);
    let loss = spec.norm.distance(&x, x0);
    Ok(assemble(lp, spec, j, x, b_hat, loss, dir))
}

/// Builds the solution record for a binding row `j` with learned rhs `b_hat`.
fn assemble(
    lp: &LinearProgram,
    spec: &ImprovementSpec,
    j: usize,
    x: Vec<f64>,
    b_hat: f64,
    loss: f64,
    dir: f64,
) -> InverseSolution {
    let n = lp.n_vars;
    let m = lp.n_constraints();
    let mut cost = vec![0.0; n];
    for (c, a) in cost.iter_mut().zip(&lp.constraints[j].row) {
        *c = -dir * a;
    }
    let mut dual = vec![0.0; m];
    dual[j] = 1.0;
    let mut dual_rhs = canonical_rhs(lp);
    dual_rhs[j] = -dir * b_hat;
    let b_hat_vec: Vec<f64> = spec
        .improvable
        .iter()
        .map(|&k| if k == j { b_hat } else { lp.constraints[k].rhs })
        .collect();
    InverseSolution {
        cost,
        x,
        dual,
        b_hat: b_hat_vec,
        loss,
        binding_index: j,
        improvable: spec.improvable.clone(),
        dual_rhs,
    }
}

/// Improves the best single constraint out of `spec.improvable`.
///
/// Each candidate row is solved with [`solve_mil`]; the winner has the
/// smallest weighted objective, ties going first to smaller loss and then to
/// the lower row index.
pub fn solve_ilg(
    lp: &LinearProgram,
    x0: &[f64],
    spec: &ImprovementSpec,
) -> Result<InverseSolution, InverseError> {
    spec.validate(lp)?;
    let mut best: Option<(f64, InverseSolution)> = None;
    let mut last_err = None;
    for (pos, &j) in spec.improvable.iter().enumerate() {
        let sol = match solve_mil(lp, x0, j, spec) {
            Ok(sol) => sol,
            Err(e @ (InverseError::SubproblemInfeasible { .. }
            | InverseError::SubproblemUnbounded { .. })) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let b_hat = sol.b_hat[pos];
        let objective =
            spec.omega * sol.loss + (1.0 - spec.omega) * f64::from(spec.direction[pos]) * b_hat;
        let better = match &best {
            None => true,
            Some((best_obj, best_sol)) => {
                let tol = 1e-9 * (1.0 + best_obj.abs());
                objective < best_obj - tol
                    || (objective <= best_obj + tol && sol.loss < best_sol.loss - 1e-12)
            }
        };
        if better {
            best = Some((objective, sol));
        }
    }
    match best {
        Some((_, sol)) => Ok(sol),
        None => Err(last_err.unwrap_or(InverseError::NoBindingConstraint)),
    }
}

/// Re-checks a solution's certificate and its improvement guarantee.
///
/// The certificate must be structurally sound: nonnegative dual weights
/// summing to one, and `cost . x` equal to `dual_rhs . dual` so the claimed
/// constraint actually binds. Given that, `margin = cost . (x - x0)` and the
/// guarantee holds when the margin is not meaningfully negative.
pub fn verify_improvement(sol: &InverseSolution, x0: &[f64]) -> ImprovementCheck {
    let cx: f64 = sol.cost.iter().zip(&sol.x).map(|(c, v)| c * v).sum();
    let cx0: f64 = sol.cost.iter().zip(x0).map(|(c, v)| c * v).sum();
    let margin = cx - cx0;
    let tol = opt_tol(cx);
    let weights_ok = sol.dual.iter().all(|&y| y >= -TAU_FEAS)
        && (sol.dual.iter().sum::<f64>() - 1.0).abs() <= TAU_FEAS
        && sol.binding_index < sol.dual.len()
        && sol.dual_rhs.len() == sol.dual.len()
        && sol.x.len() == sol.cost.len()
        && x0.len() == sol.cost.len();
    let by: f64 = sol.dual_rhs.iter().zip(&sol.dual).map(|(b, y)| b * y).sum();
    let binding_ok = weights_ok && (cx - by).abs() <= tol;
    ImprovementCheck { holds: binding_ok && margin >= -tol, margin }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_lp() -> LinearProgram {
        let mut lp = LinearProgram::new(2, Sense::Maximize);
        lp.push_constraint(vec![1.0, 0.0], Relation::Le, 1.0);
        lp.push_constraint(vec![0.0, 1.0], Relation::Le, 1.0);
        lp.push_constraint(vec![1.0, 0.0], Relation::Ge, 0.0);
        lp.push_constraint(vec![0.0, 1.0], Relation::Ge, 0.0);
        lp
    }

    #[test]
    fn spec_validation_catches_bad_inputs() {
        let lp = box_lp();
        let mut spec = ImprovementSpec::single(0, 0.0, 2.0, 0.5, Norm::L1, -1);
        assert!(spec.validate(&lp).is_ok());
        spec.omega = 1.5;
        assert!(matches!(spec.validate(&lp), Err(InverseError::OmegaRange { .. })));
        spec.omega = 0.5;
        spec.b_upper[0] = -1.0;
        assert!(matches!(spec.validate(&lp), Err(InverseError::BoundOrder { .. })));
        spec.b_upper[0] = 0.5;
        assert!(matches!(
            spec.validate(&lp),
            Err(InverseError::OriginalRhsOutsideBounds { .. })
        ));
    }

    #[test]
    fn norm_distances() {
        assert_eq!(Norm::L1.distance(&[1.0, 2.0], &[0.0, 4.0]), 3.0);
        assert_eq!(Norm::Linf.distance(&[1.0, 2.0], &[0.0, 4.0]), 2.0);
    }

    #[test]
    fn norm_serializes_lowercase() {
        assert_eq!(serde_json::to_string(&Norm::L1).unwrap(), "\"l1\"");
        assert_eq!(serde_json::to_string(&Norm::Linf).unwrap(), "\"linf\"");
    }

    #[test]
    fn mil_rejects_row_outside_candidate_set() {
        let lp = box_lp();
        let spec = ImprovementSpec::single(0, 0.0, 2.0, 0.5, Norm::L1, -1);
        let err = solve_mil(&lp, &[0.5, 0.5], 1, &spec).unwrap_err();
        assert!(matches!(err, InverseError::NotImprovable { row: 1 }));
    }
}
