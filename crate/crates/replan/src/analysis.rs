//! Dose-volume histograms, tail metrics, and Pareto sweeps.
//!
//! The DVH is the empirical survivor function of a dose vector; metrics read
//! off it with step semantics (no interpolation). [`pareto_sweep`] re-solves
//! a plan with one upper and one lower dose-volume objective softened into
//! weighted penalties, producing a frontier of plans to compare parameter
//! sets.

use serde::{Deserialize, Serialize};

use crate::lp::{solve_lp, LpError, LpStatus, Relation};
use crate::rtp::{
    build_rtp, cvar_value, lower_cvar_value, BoundKind, DvKind, Plan, PlanProblem, RtpError,
};
use crate::tol::TAU_OPT;

/// Empirical survivor curve: fraction of volume receiving at least each dose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhCurve {
    pub structure: String,
    /// (dose Gy, fraction receiving >= dose), sorted by dose.
    pub points: Vec<(f64, f64)>,
}

impl DvhCurve {
    /// Attaches a structure name.
    pub fn named(mut self, structure: &str) -> Self {
        self.structure = structure.to_string();
        self
    }
}

/// One plan of a weighted sweep with its two criterion values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    /// (w_oar, w_target).
    pub weights: (f64, f64),
    pub plan: Plan,
    /// (OAR hot-tail mean, target cold-tail mean) of the solved doses.
    pub objective_values: (f64, f64),
    pub dominated: bool,
}

/// Errors from curve construction and sweeps.
#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("doses must be non-empty and non-negative")]
    BadDoses,
    #[error("volume fraction must lie in (0, 1], got {value}")]
    FractionRange { value: f64 },
    #[error("objective index {index} is not a sweepable dose-volume row of the expected kind")]
    BadObjectiveRef { index: usize },
    #[error("at least one weight pair is required; weights must be non-negative and finite")]
    BadWeights,
    #[error("sub-solve at weights ({w_oar}, {w_target}) failed: {source}")]
    SubSolve { w_oar: f64, w_target: f64, source: LpError },
    #[error("sub-solve at weights ({w_oar}, {w_target}) is infeasible")]
    SubSolveInfeasible { w_oar: f64, w_target: f64 },
    #[error(transparent)]
    Rtp(#[from] RtpError),
}

/// Survivor function of `doses`, sampled at `n_points` uniform levels from 0
/// to the maximum dose plus every exact dose value.
pub fn dvh(doses: &[f64], n_points: usize) -> Result<DvhCurve, AnalysisError> {
    if doses.is_empty() || doses.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(AnalysisError::BadDoses);
    }
    let max = doses.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut levels: Vec<f64> = doses.to_vec();
    levels.push(0.0);
    if n_points > 1 && max > 0.0 {
        for i in 0..n_points {
            levels.push(max * i as f64 / (n_points - 1) as f64);
        }
    }
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let n = doses.len() as f64;
    let points = levels
        .into_iter()
        .map(|t| (t, doses.iter().filter(|&&d| d >= t).count() as f64 / n))
        .collect();
    Ok(DvhCurve { structure: String::new(), points })
}

/// Largest dose level received by at least `fraction` of the volume, read
/// from the curve with step semantics.
pub fn dose_at_volume(curve: &DvhCurve, fraction: f64) -> Result<f64, AnalysisError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AnalysisError::FractionRange { value: fraction });
    }
    curve
        .points
        .iter()
        .filter(|(_, f)| *f >= fraction)
        .map(|(d, _)| *d)
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.max(d))))
        .ok_or(AnalysisError::BadDoses)
}

/// Solves one plan per weight pair with the two referenced dose-volume rows
/// softened: the hard rows are dropped and each pair adds
/// `w_oar * (excess above the OAR limit)` and `w_target * (shortfall below
/// the target limit)` to the planning objective, with a small tail-mean term
/// keeping the auxiliaries canonical. Points come back sorted by `w_oar`
/// with dominated ones flagged.
pub fn pareto_sweep(
    problem: &PlanProblem,
    oar_objective: usize,
    target_objective: usize,
    weight_pairs: &[(f64, f64)],
) -> Result<Vec<ParetoPoint>, AnalysisError> {
    if weight_pairs.is_empty()
        || weight_pairs
            .iter()
            .any(|(a, b)| !a.is_finite() || !b.is_finite() || *a < 0.0 || *b < 0.0)
    {
        return Err(AnalysisError::BadWeights);
    }
    let model = build_rtp(problem)?;
    let oar_row = sweep_row(problem, &model, oar_objective, DvKind::MaxDvh)?;
    let target_row = sweep_row(problem, &model, target_objective, DvKind::MinDvh)?;
    if oar_row == target_row {
        return Err(AnalysisError::BadObjectiveRef { index: target_objective });
    }
    let oar = &model.dvh_rows[oar_row];
    let target = &model.dvh_rows[target_row];

    let mut points = Vec::with_capacity(weight_pairs.len());
    let mut order: Vec<usize> = (0..weight_pairs.len()).collect();
    order.sort_by(|&a, &b| {
        weight_pairs[a]
            .0
            .partial_cmp(&weight_pairs[b].0)
            .unwrap()
            .then(a.cmp(&b))
    });
    for idx in order {
        let (w_oar, w_target) = weight_pairs[idx];
        let mut lp = model.lp.clone();
        let mut drop_rows = [oar.row, target.row];
        drop_rows.sort_unstable();
        lp.constraints.remove(drop_rows[1]);
        lp.constraints.remove(drop_rows[0]);
        let s_oar = lp.n_vars;
        let s_target = lp.n_vars + 1;
        lp.n_vars += 2;
        for c in &mut lp.constraints {
            c.row.resize(lp.n_vars, 0.0);
        }
        // s_oar >= tail expression - U; s_target >= L - tail expression.
        let coef_o = 1.0 / ((1.0 - oar.fraction) * oar.voxels.len() as f64);
        let mut row = vec![0.0; lp.n_vars];
        row[s_oar] = 1.0;
        row[oar.gamma_col] = -1.0;
        for c in oar.dbar_cols.clone() {
            row[c] = -coef_o;
        }
        lp.push_constraint(row, Relation::Ge, -oar.limit);
        let coef_t = 1.0 / ((1.0 - target.fraction) * target.voxels.len() as f64);
        let mut row = vec![0.0; lp.n_vars];
        row[s_target] = 1.0;
        row[target.gamma_col] = 1.0;
        for c in target.dbar_cols.clone() {
            row[c] = -coef_t;
        }
        lp.push_constraint(row, Relation::Ge, target.limit);
        for s in [s_oar, s_target] {
            let mut row = vec![0.0; lp.n_vars];
            row[s] = 1.0;
            lp.push_constraint(row, Relation::Ge, 0.0);
        }
        let mut cost = lp.cost.take().unwrap_or_else(|| vec![0.0; model.vars.total]);
        cost.resize(lp.n_vars, 0.0);
        cost[s_oar] += w_oar;
        cost[s_target] += w_target;
        let eps_o = 1e-3 * w_oar;
        cost[oar.gamma_col] += eps_o;
        for c in oar.dbar_cols.clone() {
            cost[c] += eps_o * coef_o;
        }
        let eps_t = 1e-3 * w_target;
        cost[target.gamma_col] -= eps_t;
        for c in target.dbar_cols.clone() {
            cost[c] += eps_t * coef_t;
        }
        lp.cost = Some(cost);

        let sol = solve_lp(&lp)
            .map_err(|source| AnalysisError::SubSolve { w_oar, w_target, source })?;
        match sol.status {
            LpStatus::Optimal => {}
            _ => return Err(AnalysisError::SubSolveInfeasible { w_oar, w_target }),
        }
        let plan = model.extract_plan(&sol.x[..model.vars.total], sol.objective);
        let oar_doses: Vec<f64> = oar.voxels.iter().map(|&v| plan.voxel_doses[v]).collect();
        let target_doses: Vec<f64> =
            target.voxels.iter().map(|&v| plan.voxel_doses[v]).collect();
        let values = (
            cvar_value(&oar_doses, oar.fraction)?,
            lower_cvar_value(&target_doses, target.fraction)?,
        );
        points.push(ParetoPoint {
            weights: (w_oar, w_target),
            plan,
            objective_values: values,
            dominated: false,
        });
    }
    flag_dominated(&mut points);
    Ok(points)
}

/// Maps an objective index to its CVaR row in the built model, requiring the
/// expected kind with an interior fraction.
fn sweep_row(
    problem: &PlanProblem,
    model: &crate::rtp::RtpModel,
    index: usize,
    expected: DvKind,
) -> Result<usize, AnalysisError> {
    let o = problem
        .objectives
        .get(index)
        .ok_or(AnalysisError::BadObjectiveRef { index })?;
    if o.kind != expected || o.fraction >= 1.0 {
        return Err(AnalysisError::BadObjectiveRef { index });
    }
    // CVaR rows appear in objective order; count the producers before this one.
    let row = problem.objectives[..index]
        .iter()
        .filter(|p| matches!(p.kind, DvKind::MaxDvh | DvKind::MinDvh) && p.fraction < 1.0)
        .count();
    let expected_bound =
        if expected == DvKind::MaxDvh { BoundKind::Upper } else { BoundKind::Lower };
    if model.dvh_rows[row].bound_kind != expected_bound {
        return Err(AnalysisError::BadObjectiveRef { index });
    }
    Ok(row)
}

/// Flags every point beaten by another: no worse on both criteria within
/// tolerance and strictly better on at least one.
fn flag_dominated(points: &mut [ParetoPoint]) {
    let values: Vec<(f64, f64)> = points.iter().map(|p| p.objective_values).collect();
    for (i, p) in points.iter_mut().enumerate() {
        p.dominated = values.iter().enumerate().any(|(j, &(oar, target))| {
            j != i
                && oar <= values[i].0 + TAU_OPT
                && target >= values[i].1 - TAU_OPT
                && (oar < values[i].0 - TAU_OPT || target > values[i].1 + TAU_OPT)
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survivor_fractions_count_voxels_at_or_above() {
        let curve = dvh(&[10.0, 20.0, 30.0, 40.0], 9).unwrap();
        let at = |t: f64| {
            curve
                .points
                .iter()
                .find(|(d, _)| (*d - t).abs() < 1e-12)
                .map(|(_, f)| *f)
                .unwrap()
        };
        assert_eq!(at(0.0), 1.0);
        assert_eq!(at(25.0), 0.5);
        assert_eq!(at(20.0), 0.75);
        assert_eq!(at(40.0), 0.25);
    }

    #[test]
    fn constant_doses_stay_at_full_volume_up_to_the_constant() {
        let curve = dvh(&[5.0, 5.0, 5.0], 6).unwrap();
        assert!(curve.points.iter().all(|&(_, f)| f == 1.0));
        assert_eq!(curve.points.last(), Some(&(5.0, 1.0)));
    }

    #[test]
    fn zero_dose_voxel_gives_the_single_point_curve() {
        let curve = dvh(&[0.0], 8).unwrap();
        assert_eq!(curve.points, vec![(0.0, 1.0)]);
    }

    #[test]
    fn volume_metric_picks_the_hottest_fraction_minimum() {
        let curve = dvh(&[10.0, 20.0, 30.0, 40.0], 5).unwrap();
        assert_eq!(dose_at_volume(&curve, 0.5).unwrap(), 30.0);
        assert_eq!(dose_at_volume(&curve, 1.0).unwrap(), 10.0);
        assert_eq!(dose_at_volume(&curve, 0.001).unwrap(), 40.0);
        assert!(matches!(
            dose_at_volume(&curve, 0.0),
            Err(AnalysisError::FractionRange { .. })
        ));
    }
}
