//! Shared numeric tolerances.
//!
//! Every feasibility or optimality comparison in the crate goes through the
//! two constants below; nothing else hard-codes a threshold for those checks.

/// Feasibility tolerance: a constraint is considered satisfied when its
/// violation does not exceed this value.
pub const TAU_FEAS: f64 = 1e-8;

/// Optimality tolerance, relative to the objective scale via [`opt_tol`].
pub const TAU_OPT: f64 = 1e-7;

/// Optimality tolerance scaled for an objective of the given magnitude:
/// `TAU_OPT * (1 + |objective|)`.
pub fn opt_tol(objective: f64) -> f64 {
    TAU_OPT * (1.0 + objective.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opt_tol_scales_with_objective() {
        assert_eq!(opt_tol(0.0), TAU_OPT);
        assert_eq!(opt_tol(-9.0), 10.0 * TAU_OPT);
        assert!(opt_tol(1e6) > 0.09 * 1e-2);
    }
}
