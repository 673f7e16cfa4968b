//! Numeric tolerances and guard constants used across the crate.
//!
//! Every tolerance that a test or verification suite depends on lives here so
//! the thresholds are pinned in one place.

/// Central-difference step for gradient checking.
pub const FD_STEP: f64 = 1e-5;

/// Maximum allowed relative error between reverse-mode and central-difference
/// gradients, measured as |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
pub const GRAD_CHECK_REL_TOL: f64 = 1e-4;

/// Gyrogroup identities (x (-) x = 0, x (-) 0 = x, 0 (-) y = -y).
pub const GYRO_IDENTITY_TOL: f64 = 1e-10;

/// Round-trip error bound for exp/log map inversion, relative to max(1, |v|).
pub const EXP_LOG_ROUND_TRIP_TOL: f64 = 1e-6;

/// Points are clamped so that sqrt(c) * |x| <= 1 - BALL_MARGIN.
pub const BALL_MARGIN: f64 = 1e-5;

/// Absolute slack when asserting ball containment, covering the final
/// rounding of the clamp itself.
pub const BALL_CONTAINMENT_SLACK: f64 = 1e-10;

/// |det J - 1| bound for the volume-preserving integrator variant, and the
/// bound for matching the closed-form determinant of the explicit variant.
pub const SYMPLECTIC_DET_TOL: f64 = 1e-6;

/// Chebyshev recursion vs. spectral-domain reference on symmetric operators.
pub const CHEBYSHEV_ORACLE_TOL: f64 = 1e-8;

/// Chebyshev recursion vs. cos(k * acos(lambda)) on diagonal operators.
pub const CHEBYSHEV_DIAG_TOL: f64 = 1e-10;

/// Permutation equivariance of relation aggregation and the spectral branch.
pub const PERMUTATION_EQUIVARIANCE_TOL: f64 = 1e-12;

/// Similarity matrix entries are clamped into (SIMILARITY_CLAMP, 1 - SIMILARITY_CLAMP).
pub const SIMILARITY_CLAMP: f64 = 1e-7;

/// atanh arguments are clamped into (-1 + ATANH_GUARD, 1 - ATANH_GUARD).
pub const ATANH_GUARD: f64 = 1e-7;

/// Vector norms below this threshold are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Additive guard for row normalization of the similarity graph and for the
/// spectral rescaling divisor.
pub const GRAPH_NORM_EPS: f64 = 1e-8;

/// Minimum magnitude of a Mobius-addition denominator.
pub const MOBIUS_DEN_MIN: f64 = 1e-12;

/// Layer normalization variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Curvature is softplus(raw) + CURVATURE_FLOOR, keeping it strictly positive.
pub const CURVATURE_FLOOR: f64 = 1e-6;

/// Learnable repulsion scale is softplus(raw) + SCALE_FLOOR.
pub const SCALE_FLOOR: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_hierarchy_is_ordered() {
        // Looser checks must never be tighter than the primitives they
        // depend on, otherwise a passing sub-check could mask a failure.
        assert!(GRAD_CHECK_REL_TOL > FD_STEP * FD_STEP);
        assert!(EXP_LOG_ROUND_TRIP_TOL > GYRO_IDENTITY_TOL);
        assert!(CHEBYSHEV_ORACLE_TOL > CHEBYSHEV_DIAG_TOL);
        assert!(BALL_MARGIN > BALL_CONTAINMENT_SLACK);
        assert!(GYRO_IDENTITY_TOL > PERMUTATION_EQUIVARIANCE_TOL);
    }
}
