//! Plan improvement: learning tighter dose-volume limits from an existing
//! plan.
//!
//! [`improve_once`] fixes one dose-volume row of a planning problem, turns
//! its limit into a decision variable `U`, and minimizes a blend of the
//! distance to the observed plan's doses and the learned limit pushed in the
//! requested direction, subject to every other planning constraint. The
//! result carries a duality certificate showing the new plan beats the
//! observation under the learned bound's cost. [`improve_iteratively`] loops
//! this, feeding each plan back as the next observation, until the limit
//! settles.

use serde::{Deserialize, Serialize};

use crate::inverse::{verify_improvement, ImprovementCheck, InverseSolution, Norm};
use crate::lp::{solve_lp, LinearProgram, LpStatus, Relation, Sense};
use crate::rtp::{
    build_rtp, cvar_value, lower_cvar_value, BoundKind, Plan, PlanProblem, RtpError, RtpModel,
};
use crate::tol::{opt_tol, TAU_FEAS, TAU_OPT};

/// Which dose-volume row to improve and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTarget {
    pub structure: String,
    /// Tail parameter of the targeted row.
    pub fraction: f64,
    pub bound_kind: BoundKind,
    /// Window for the learned limit.
    pub u_lower: f64,
    pub u_upper: f64,
    /// Blend between plan distance (1) and limit movement (0).
    pub omega: f64,
    /// +1 pushes the limit down, -1 pushes it up.
    pub direction: i8,
    /// Distance measure over the voxel-dose block.
    pub norm: Norm,
}

impl ImprovementTarget {
    /// Tightening target for an upper row with the default blend and L1
    /// distance.
    pub fn tighten_upper(structure: &str, fraction: f64, u_lower: f64, u_upper: f64) -> Self {
        ImprovementTarget {
            structure: structure.to_string(),
            fraction,
            bound_kind: BoundKind::Upper,
            u_lower,
            u_upper,
            omega: 0.5,
            direction: 1,
            norm: Norm::L1,
        }
    }
}

/// Outcome of one improvement (or an improvement loop).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementResult {
    pub new_plan: Plan,
    pub learned_limit: f64,
    pub old_limit: f64,
    /// Distance between the new and observed doses in the target's norm.
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Duality certificate of the improvement guarantee.
    pub check: ImprovementCheck,
}

/// One structure metric before and after improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub structure: String,
    pub metric: String,
    pub before_gy: f64,
    pub after_gy: f64,
    pub delta_gy: f64,
    pub delta_pct: f64,
}

/// Per-structure metric deltas between two plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanComparison {
    pub rows: Vec<MetricDelta>,
}

impl PlanComparison {
    /// Tabular rendering: Gy columns at two decimals, percentages at one.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("structure,metric,before_gy,after_gy,delta_gy,delta_pct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.2},{:.2},{:.2},{:.1}\n",
                r.structure, r.metric, r.before_gy, r.after_gy, r.delta_gy, r.delta_pct
            ));
        }
        out
    }
}

/// Errors from improvement runs.
#[derive(Debug, thiserror::Error)]
pub enum ImproveError {
    #[error("target references unknown structure {name}")]
    UnknownStructure { name: String },
    #[error("target fraction must lie strictly between 0 and 1, got {value}")]
    FractionRange { value: f64 },
    #[error("limit window must be finite with u_lower <= u_upper")]
    BadWindow,
    #[error("omega must lie in [0, 1], got {omega}")]
    OmegaRange { omega: f64 },
    #[error("direction must be +1 or -1")]
    BadDirection,
    #[error("plan shape does not match the problem")]
    PlanShape,
    #[error("observed plan violates a non-targeted constraint by {violation:.3e}")]
    ObservationInfeasible { violation: f64 },
    #[error("no plan satisfies the limit window; bounds too tight")]
    BoundsTooTight,
    #[error("stopping threshold must be positive and max_iters at least 1")]
    BadStopping,
    #[error("learned limits moved against the requested direction: {prev} then {next}")]
    NonMonotone { prev: f64, next: f64 },
    #[error("improvement subproblem reported an unexpected solver status")]
    Internal,
    #[error(transparent)]
    Rtp(#[from] RtpError),
    #[error(transparent)]
    Lp(#[from] crate::lp::LpError),
}

fn validate(
    problem: &PlanProblem,
    plan0: &Plan,
    target: &ImprovementTarget,
) -> Result<(), ImproveError> {
    if problem.structure(&target.structure).is_none() {
        return Err(ImproveError::UnknownStructure { name: target.structure.clone() });
    }
    if !(target.fraction > 0.0 && target.fraction < 1.0) {
        return Err(ImproveError::FractionRange { value: target.fraction });
    }
    if !target.u_lower.is_finite() || !target.u_upper.is_finite() || target.u_lower > target.u_upper
    {
        return Err(ImproveError::BadWindow);
    }
    if !(0.0..=1.0).contains(&target.omega) {
        return Err(ImproveError::OmegaRange { omega: target.omega });
    }
    if target.direction != 1 && target.direction != -1 {
        return Err(ImproveError::BadDirection);
    }
    if plan0.voxel_doses.len() != problem.n_voxels || plan0.beam_weights.len() != problem.n_beams {
        return Err(ImproveError::PlanShape);
    }
    Ok(())
}

/// Distance between two dose vectors: mean absolute difference for L1,
/// largest absolute difference for Linf.
fn dose_distance(norm: Norm, a: &[f64], b: &[f64]) -> f64 {
    match norm {
        Norm::L1 => {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        }
        Norm::Linf => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max),
    }
}

/// The model plus the targeted row, adding the row when the problem lacks it
/// (its starting limit is then the observed plan's own tail value).
fn model_with_target(
    problem: &PlanProblem,
    plan0: &Plan,
    target: &ImprovementTarget,
) -> Result<(RtpModel, usize, f64), ImproveError> {
    let mut model = build_rtp(problem)?;
    let found = model.dvh_rows.iter().position(|h| {
        h.structure == target.structure
            && (h.fraction - target.fraction).abs() <= 1e-12
            && h.bound_kind == target.bound_kind
    });
    match found {
        Some(idx) => {
            let limit = model.dvh_rows[idx].limit;
            Ok((model, idx, limit))
        }
        None => {
            let s = problem.structure(&target.structure).unwrap();
            let doses = problem.structure_doses(s, &plan0.voxel_doses);
            let limit = match target.bound_kind {
                BoundKind::Upper => cvar_value(&doses, target.fraction)?,
                BoundKind::Lower => lower_cvar_value(&doses, target.fraction)?,
            };
            let idx = model.add_dvh_row(
                problem,
                &target.structure,
                target.fraction,
                target.bound_kind,
                limit,
            )?;
            Ok((model, idx, limit))
        }
    }
}

/// Largest violation of `x` over all rows except `skip`.
fn off_target_violation(lp: &LinearProgram, x: &[f64], skip: usize) -> f64 {
    let mut worst = 0.0f64;
    for (i, c) in lp.constraints.iter().enumerate() {
        if i == skip {
            continue;
        }
        let lhs: f64 = c.row.iter().zip(x).map(|(a, v)| a * v).sum();
        let violation = match c.rel {
            Relation::Le => lhs - c.rhs,
            Relation::Ge => c.rhs - lhs,
            Relation::Eq => (lhs - c.rhs).abs(),
        };
        worst = worst.max(violation);
    }
    worst
}

/// Certificate that the new plan beats the observation under the learned
/// bound's cost: the targeted row's coefficients (negated along the push
/// direction) price both plans, with the unit dual on the learned limit.
fn certificate(
    model: &RtpModel,
    row: usize,
    direction: f64,
    x: Vec<f64>,
    learned: f64,
    loss: f64,
) -> InverseSolution {
    let cost: Vec<f64> =
        model.lp.constraints[row].row.iter().map(|&a| -direction * a).collect();
    InverseSolution {
        cost,
        x,
        dual: vec![1.0],
        b_hat: vec![learned],
        loss,
        binding_index: 0,
        improvable: vec![row],
        dual_rhs: vec![-direction * learned],
    }
}

/// Learns a new limit for the targeted row from one observed plan.
pub fn improve_once(
    problem: &PlanProblem,
    plan0: &Plan,
    target: &ImprovementTarget,
) -> Result<ImprovementResult, ImproveError> {
    validate(problem, plan0, target)?;
    let (model, handle_idx, old_limit) = model_with_target(problem, plan0, target)?;
    let handle = &model.dvh_rows[handle_idx];
    let row = handle.row;
    let dir = target.direction as f64;

    let x0 = model.embed_plan(plan0);
    let violation = off_target_violation(&model.lp, &x0, row);
    if violation > TAU_FEAS {
        return Err(ImproveError::ObservationInfeasible { violation });
    }
    let observed_value: f64 =
        model.lp.constraints[row].row.iter().zip(&x0).map(|(a, v)| a * v).sum();

    // Full distance weight: the observation itself is optimal whenever its
    // own tail value fits the window.
    if target.omega == 1.0
        && observed_value >= target.u_lower - TAU_FEAS
        && observed_value <= target.u_upper + TAU_FEAS
    {
        let learned = observed_value.clamp(target.u_lower, target.u_upper);
        let new_plan = model.extract_plan(&x0, model.lp.objective_value(&x0));
        let sol = certificate(&model, row, dir, x0.clone(), learned, 0.0);
        let check = verify_improvement(&sol, &x0);
        return Ok(ImprovementResult {
            new_plan,
            learned_limit: learned,
            old_limit,
            loss: 0.0,
            iterations: 1,
            converged: true,
            check,
        });
    }

    // Columns: model variables, then U, then the distance block.
    let total = model.vars.total;
    let u_col = total;
    let t_start = total + 1;
    let t_len = match target.norm {
        Norm::L1 => problem.n_voxels,
        Norm::Linf => 1,
    };
    let n_cols = t_start + t_len;
    let mut lp = LinearProgram::new(n_cols, Sense::Minimize);
    for (i, c) in model.lp.constraints.iter().enumerate() {
        let mut r = vec![0.0; n_cols];
        r[..total].copy_from_slice(&c.row);
        if i == row {
            r[u_col] = -1.0;
            lp.push_constraint(r, Relation::Eq, 0.0);
        } else {
            lp.push_constraint(r, c.rel, c.rhs);
        }
    }
    let mut window = vec![0.0; n_cols];
    window[u_col] = 1.0;
    lp.push_constraint(window.clone(), Relation::Ge, target.u_lower);
    lp.push_constraint(window, Relation::Le, target.u_upper);
    for v in 0..problem.n_voxels {
        let t = match target.norm {
            Norm::L1 => t_start + v,
            Norm::Linf => t_start,
        };
        let d0 = plan0.voxel_doses[v];
        let mut r = vec![0.0; n_cols];
        r[t] = 1.0;
        r[v] = -1.0;
        lp.push_constraint(r, Relation::Ge, -d0);
        let mut r = vec![0.0; n_cols];
        r[t] = 1.0;
        r[v] = 1.0;
        lp.push_constraint(r, Relation::Ge, d0);
    }
    for t in t_start..n_cols {
        let mut r = vec![0.0; n_cols];
        r[t] = 1.0;
        lp.push_constraint(r, Relation::Ge, 0.0);
    }
    let mut cost = vec![0.0; n_cols];
    cost[u_col] = (1.0 - target.omega) * dir;
    let t_weight = match target.norm {
        Norm::L1 => target.omega / problem.n_voxels as f64,
        Norm::Linf => target.omega,
    };
    for c in &mut cost[t_start..] {
        *c = t_weight;
    }
    lp.cost = Some(cost.clone());

    let first = solve_lp(&lp)?;
    match first.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(ImproveError::BoundsTooTight),
        LpStatus::Unbounded => return Err(ImproveError::Internal),
    }

    // Among solutions of equal stage-one value, prefer the smallest plan
    // movement; a zero distance weight instead pins the learned limit, which
    // every stage-one optimum shares.
    if target.omega == 0.0 {
        let mut pin = vec![0.0; n_cols];
        pin[u_col] = 1.0;
        lp.push_constraint(pin, Relation::Eq, first.x[u_col]);
    } else {
        let budget = first.objective + 1e-9 * (1.0 + first.objective.abs());
        lp.push_constraint(cost, Relation::Le, budget);
    }
    let mut distance_cost = vec![0.0; n_cols];
    for c in &mut distance_cost[t_start..] {
        *c = 1.0;
    }
    lp.cost = Some(distance_cost);
    let second = solve_lp(&lp)?;
    let x = match second.status {
        LpStatus::Optimal => second.x,
        _ => first.x,
    };

    let learned = x[u_col].clamp(target.u_lower, target.u_upper);
    let new_plan = model.extract_plan(&x[..total], model.lp.objective_value(&x[..total]));
    let loss = dose_distance(target.norm, &new_plan.voxel_doses, &plan0.voxel_doses);
    let sol = certificate(&model, row, dir, x[..total].to_vec(), learned, loss);
    let check = verify_improvement(&sol, &x0);
    Ok(ImprovementResult {
        new_plan,
        learned_limit: learned,
        old_limit,
        loss,
        iterations: 1,
        converged: true,
        check,
    })
}

/// Repeats [`improve_once`], feeding each plan back as the observation,
/// until the limit reaches the window edge, the plan stops moving, or the
/// limit step falls below `eps_stop`. The reported loss measures the final
/// plan against the original observation.
pub fn improve_iteratively(
    problem: &PlanProblem,
    plan0: &Plan,
    target: &ImprovementTarget,
    eps_stop: f64,
    max_iters: usize,
) -> Result<ImprovementResult, ImproveError> {
    if !eps_stop.is_finite() || eps_stop <= 0.0 || max_iters == 0 {
        return Err(ImproveError::BadStopping);
    }
    let dir = target.direction as f64;
    let mut current = plan0.clone();
    let mut u_prev: Option<f64> = None;
    let mut first_old_limit = 0.0;
    let mut last: Option<ImprovementResult> = None;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let res = improve_once(problem, &current, target)?;
        iterations += 1;
        // Successive learned limits must not move against the push; the
        // starting limit only seeds the step-size test.
        if let Some(prev) = u_prev {
            let tol = opt_tol(prev);
            if dir * (res.learned_limit - prev) > tol {
                return Err(ImproveError::NonMonotone { prev, next: res.learned_limit });
            }
        } else {
            first_old_limit = res.old_limit;
        }
        let prev = u_prev.unwrap_or(res.old_limit);
        let edge = if target.direction == 1 { target.u_lower } else { target.u_upper };
        let at_edge = (res.learned_limit - edge).abs() <= TAU_OPT * (1.0 + edge.abs());
        let moved = dose_distance(Norm::Linf, &res.new_plan.voxel_doses, &current.voxel_doses);
        let fixpoint = moved <= TAU_FEAS * (1.0 + plan_scale(&current));
        let small_step = (res.learned_limit - prev).abs() < eps_stop;
        u_prev = Some(res.learned_limit);
        current = res.new_plan.clone();
        last = Some(res);
        if at_edge || fixpoint || small_step {
            converged = true;
            break;
        }
    }
    let mut result = last.expect("max_iters is at least 1");
    result.iterations = iterations;
    result.converged = converged;
    result.old_limit = first_old_limit;
    result.loss = dose_distance(target.norm, &result.new_plan.voxel_doses, &plan0.voxel_doses);
    Ok(result)
}

fn plan_scale(plan: &Plan) -> f64 {
    plan.voxel_doses.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

/// Standard volume fractions reported per structure.
const REPORT_FRACTIONS: [(f64, &str); 4] =
    [(0.95, "D_95"), (0.70, "D_70"), (0.30, "D_30"), (0.05, "D_5")];

/// Metric deltas between two plans of the same problem: max, mean, and the
/// standard dose-at-volume levels per structure.
pub fn compare_plans(
    before: &Plan,
    after: &Plan,
    problem: &PlanProblem,
) -> Result<PlanComparison, ImproveError> {
    if before.voxel_doses.len() != problem.n_voxels
        || after.voxel_doses.len() != problem.n_voxels
    {
        return Err(ImproveError::PlanShape);
    }
    let mut rows = Vec::new();
    for s in &problem.structures {
        let b = problem.structure_doses(s, &before.voxel_doses);
        let a = problem.structure_doses(s, &after.voxel_doses);
        let mut push = |metric: &str, bv: f64, av: f64| {
            let delta = av - bv;
            let pct = if bv.abs() > 1e-12 { 100.0 * delta / bv } else { 0.0 };
            rows.push(MetricDelta {
                structure: s.name.clone(),
                metric: metric.to_string(),
                before_gy: bv,
                after_gy: av,
                delta_gy: delta,
                delta_pct: pct,
            });
        };
        let max = |d: &[f64]| d.iter().fold(0.0f64, |acc, &v| acc.max(v));
        let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
        push("D_max", max(&b), max(&a));
        push("D_mean", mean(&b), mean(&a));
        for (fraction, name) in REPORT_FRACTIONS {
            let bv = crate::analysis::dvh(&b, 2)
                .and_then(|c| crate::analysis::dose_at_volume(&c, fraction));
            let av = crate::analysis::dvh(&a, 2)
                .and_then(|c| crate::analysis::dose_at_volume(&c, fraction));
            if let (Ok(bv), Ok(av)) = (bv, av) {
                push(name, bv, av);
            }
        }
    }
    Ok(PlanComparison { rows })
}
