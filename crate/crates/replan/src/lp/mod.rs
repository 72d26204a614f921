//! Linear programs over free variables with explicit constraint rows.
//!
//! A [`LinearProgram`] is a list of constraint rows `a'x {<=,=,>=} b` over
//! `n_vars` real variables, an optional cost vector, and a sense. Variables
//! carry no implicit sign restriction; bounds are ordinary rows. The solving
//! backend is a dense two-phase simplex ([`solve_lp`]); [`enumerate_vertices`]
//! provides an independent exhaustive check for small programs, and
//! [`duality_certificate`] validates primal/dual pairs against the usual sign
//! conventions.

mod dense;
mod simplex;

pub use dense::solve_square;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tol::TAU_FEAS;

/// Constraint relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    /// `a'x <= b`
    Le,
    /// `a'x = b`
    Eq,
    /// `a'x >= b`
    Ge,
}

/// Optimization sense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Minimize,
    Maximize,
}

/// One constraint row `row . x  rel  rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub row: Vec<f64>,
    pub rel: Relation,
    pub rhs: f64,
}

/// A linear program in inequality form with free variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub n_vars: usize,
    pub constraints: Vec<Constraint>,
    /// Cost vector; `None` for pure feasibility problems.
    pub cost: Option<Vec<f64>>,
    pub sense: Sense,
}

/// Solver status for [`LpSolution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Result of an LP solve. `x` and `objective` are meaningful only when
/// `status` is [`LpStatus::Optimal`]; `objective` is signed infinity for
/// unbounded programs and NaN for infeasible ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
}

/// Dual multipliers, one per constraint row.
pub type DualVector = Vec<f64>;

/// Per-constraint slack report from [`check_feasible`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// Signed slack per constraint: nonnegative means satisfied. For
    /// equalities this is `-|a'x - b|`.
    pub slacks: Vec<f64>,
    /// Largest violation across constraints (zero when all satisfied).
    pub max_violation: f64,
    /// Whether `max_violation <= TAU_FEAS`.
    pub feasible: bool,
}

/// Output of [`duality_certificate`].
#[derive(Debug, Clone, PartialEq)]
pub struct DualityCertificate {
    /// Duality gap `c'x - b'y`.
    pub gap: f64,
    /// Largest component of `A'y - c`.
    pub dual_residual: f64,
    /// Whether every multiplier's sign matches its row's relation and sense.
    pub signs_ok: bool,
    /// `A'y = c` within tolerance and signs conform.
    pub dual_feasible: bool,
    /// `x` satisfies every row within [`TAU_FEAS`].
    pub primal_feasible: bool,
}

/// Errors from LP construction and operations.
#[derive(Debug, Error)]
pub enum LpError {
    #[error("program must have at least one variable")]
    NoVariables,
    #[error("constraint {index} has {len} coefficients, expected {expected}")]
    RowLength {
        index: usize,
        len: usize,
        expected: usize,
    },
    #[error("non-finite value in {place}")]
    NonFinite { place: &'static str },
    #[error("cost vector has {len} entries, expected {expected}")]
    CostLength { len: usize, expected: usize },
    #[error("operation requires a cost vector")]
    MissingCost,
    #[error("point has {len} coordinates, expected {expected}")]
    PointLength { len: usize, expected: usize },
    #[error("dual vector has {len} entries, expected {expected}")]
    DualLength { len: usize, expected: usize },
    #[error(
        "vertex enumeration is capped at {max_vars} variables and {max_rows} rows, \
         got {vars} and {rows}"
    )]
    EnumerationCap {
        max_vars: usize,
        max_rows: usize,
        vars: usize,
        rows: usize,
    },
    #[error("simplex exceeded {limit} pivots without converging")]
    PivotLimit { limit: usize },
    #[error("solution failed the feasibility post-check (violation {violation:.3e})")]
    Numerical { violation: f64 },
}

/// Variable count cap for [`enumerate_vertices`].
pub const VERTEX_MAX_VARS: usize = 8;
/// Constraint count cap for [`enumerate_vertices`].
pub const VERTEX_MAX_ROWS: usize = 16;

impl LinearProgram {
    /// A program with no constraints and no cost.
    pub fn new(n_vars: usize, sense: Sense) -> Self {
        LinearProgram {
            n_vars,
            constraints: Vec::new(),
            cost: None,
            sense,
        }
    }

    /// Appends a constraint row and returns its index.
    pub fn push_constraint(&mut self, row: Vec<f64>, rel: Relation, rhs: f64) -> usize {
        self.constraints.push(Constraint { row, rel, rhs });
        self.constraints.len() - 1
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Structural validation: dimensions and finiteness.
    pub fn validate(&self) -> Result<(), LpError> {
        if self.n_vars == 0 {
            return Err(LpError::NoVariables);
        }
        for (index, c) in self.constraints.iter().enumerate() {
            if c.row.len() != self.n_vars {
                return Err(LpError::RowLength {
                    index,
                    len: c.row.len(),
                    expected: self.n_vars,
                });
            }
            if !c.rhs.is_finite() || c.row.iter().any(|v| !v.is_finite()) {
                return Err(LpError::NonFinite {
                    place: "constraint",
                });
            }
        }
        if let Some(cost) = &self.cost {
            if cost.len() != self.n_vars {
                return Err(LpError::CostLength {
                    len: cost.len(),
                    expected: self.n_vars,
                });
            }
            if cost.iter().any(|v| !v.is_finite()) {
                return Err(LpError::NonFinite { place: "cost" });
            }
        }
        Ok(())
    }

    /// Objective value `c'x`; zero when the program has no cost.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        match &self.cost {
            Some(c) => dot(c, x),
            None => 0.0,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn check_point(lp: &LinearProgram, x: &[f64]) -> Result<(), LpError> {
    if x.len() != lp.n_vars {
        return Err(LpError::PointLength {
            len: x.len(),
            expected: lp.n_vars,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LpError::NonFinite { place: "point" });
    }
    Ok(())
}

/// Evaluates `x` against every constraint of `lp`.
pub fn check_feasible(lp: &LinearProgram, x: &[f64]) -> Result<FeasibilityReport, LpError> {
    lp.validate()?;
    check_point(lp, x)?;
    let mut slacks = Vec::with_capacity(lp.constraints.len());
    let mut max_violation: f64 = 0.0;
    for c in &lp.constraints {
        let lhs = dot(&c.row, x);
        let slack = match c.rel {
            Relation::Le => c.rhs - lhs,
            Relation::Ge => lhs - c.rhs,
            Relation::Eq => -(lhs - c.rhs).abs(),
        };
        max_violation = max_violation.max(-slack);
        slacks.push(slack);
    }
    Ok(FeasibilityReport {
        slacks,
        max_violation,
        feasible: max_violation <= TAU_FEAS,
    })
}

/// Checks the primal/dual pair `(x, y)` for `lp`.
///
/// Sign conventions: for a maximization, multipliers on `<=` rows are
/// nonnegative and on `>=` rows nonpositive; for a minimization the signs
/// flip. Equality rows are unrestricted. Dual feasibility additionally
/// requires `A'y = c`, and `gap = c'x - b'y` is zero exactly when the pair is
/// optimal.
pub fn duality_certificate(
    lp: &LinearProgram,
    x: &[f64],
    y: &[f64],
) -> Result<DualityCertificate, LpError> {
    lp.validate()?;
    check_point(lp, x)?;
    let cost = lp.cost.as_ref().ok_or(LpError::MissingCost)?;
    if y.len() != lp.constraints.len() {
        return Err(LpError::DualLength {
            len: y.len(),
            expected: lp.constraints.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(LpError::NonFinite { place: "dual" });
    }

    let sign_tol = TAU_FEAS;
    let mut signs_ok = true;
    for (c, &yj) in lp.constraints.iter().zip(y) {
        let wanted = match (lp.sense, c.rel) {
            (_, Relation::Eq) => 0,
            (Sense::Maximize, Relation::Le) | (Sense::Minimize, Relation::Ge) => 1,
            (Sense::Maximize, Relation::Ge) | (Sense::Minimize, Relation::Le) => -1,
        };
        match wanted {
            1 if yj < -sign_tol => signs_ok = false,
            -1 if yj > sign_tol => signs_ok = false,
            _ => {}
        }
    }

    let mut dual_residual: f64 = 0.0;
    for (i, &ci) in cost.iter().enumerate().take(lp.n_vars) {
        let aty: f64 = lp
            .constraints
            .iter()
            .zip(y)
            .map(|(c, &yj)| c.row[i] * yj)
            .sum();
        dual_residual = dual_residual.max((aty - ci).abs());
    }
    let cost_scale = 1.0 + cost.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let by: f64 = lp.constraints.iter().zip(y).map(|(c, &yj)| c.rhs * yj).sum();
    let gap = dot(cost, x) - by;
    let primal = check_feasible(lp, x)?;

    Ok(DualityCertificate {
        gap,
        dual_residual,
        signs_ok,
        dual_feasible: signs_ok && dual_residual <= TAU_FEAS * cost_scale,
        primal_feasible: primal.feasible,
    })
}

/// Enumerates all vertices (basic feasible points) of the constraint set.
///
/// Every subset of `n_vars` rows with a nonsingular coefficient block is
/// solved as a linear system and kept when the resulting point satisfies all
/// constraints within [`TAU_FEAS`]. Intended as an independent reference for
/// small programs; capped at [`VERTEX_MAX_VARS`] variables and
/// [`VERTEX_MAX_ROWS`] rows. Vertices are deduplicated and sorted
/// lexicographically.
pub fn enumerate_vertices(lp: &LinearProgram) -> Result<Vec<Vec<f64>>, LpError> {
    lp.validate()?;
    let n = lp.n_vars;
    let m = lp.constraints.len();
    if n > VERTEX_MAX_VARS || m > VERTEX_MAX_ROWS {
        return Err(LpError::EnumerationCap {
            max_vars: VERTEX_MAX_VARS,
            max_rows: VERTEX_MAX_ROWS,
            vars: n,
            rows: m,
        });
    }
    if m < n {
        return Ok(Vec::new());
    }

    let mut vertices: Vec<Vec<f64>> = Vec::new();
    let mut subset: Vec<usize> = (0..n).collect();
    loop {
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for (k, &idx) in subset.iter().enumerate() {
            a[k * n..(k + 1) * n].copy_from_slice(&lp.constraints[idx].row);
            b[k] = lp.constraints[idx].rhs;
        }
        if let Some(x) = solve_square(&a, &b, n) {
            if check_feasible(lp, &x)?.feasible {
                let dup = vertices
                    .iter()
                    .any(|v| v.iter().zip(&x).all(|(a, b)| (a - b).abs() <= TAU_FEAS));
                if !dup {
                    vertices.push(x);
                }
            }
        }
        if !next_combination(&mut subset, m) {
            break;
        }
    }
    vertices.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(vertices)
}

/// Advances `subset` to the next k-combination of `0..m` in lexicographic
/// order; returns false when exhausted.
fn next_combination(subset: &mut [usize], m: usize) -> bool {
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

/// Solves `lp` with the simplex backend.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    simplex::solve(lp, false).map(|o| o.solution)
}

/// Solves `lp` and, when optimal, also returns dual multipliers for every
/// constraint row. Slower than [`solve_lp`]: singleton rows are kept explicit
/// so each one receives a multiplier.
pub fn solve_lp_with_duals(lp: &LinearProgram) -> Result<(LpSolution, Option<DualVector>), LpError> {
    simplex::solve(lp, true).map(|o| (o.solution, o.duals))
}
