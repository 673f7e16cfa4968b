//! Poincare-ball operations and curvature-gated instance attention.
//!
//! Points live strictly inside the ball of radius 1/sqrt(c); every operation
//! that produces points clamps them back to radius (1 - BALL_MARGIN)/sqrt(c).
//! Row convention: a batch of points is an n x d matrix, one point per row.
//!
//! Two geometry modes exist and are never mixed:
//!
//! - [`GeometryMode::Gyro`] (default): Mobius subtraction is x (+) (-y) and
//!   exp/log are the standard gyrovector maps, so x (-) x = 0 and
//!   exp_x(log_x(y)) = y hold.
//! - [`GeometryMode::Radial`]: subtraction keeps the +2c<x,y> coupling term
//!   in both numerator and denominator, and the exponential map is the
//!   radial cosh/sinh blend clamped back into the ball. These forms are not
//!   mutually inverse; the mode exists for comparison runs and is exercised
//!   by its own tests.

use crate::tape::{Tape, TapeError, TapeResult, ValueId};
use crate::tolerances::{ATANH_GUARD, BALL_MARGIN, CURVATURE_FLOOR, MOBIUS_DEN_MIN, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeometryMode {
    #[default]
    Gyro,
    Radial,
}

impl GeometryMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gyro" => Some(GeometryMode::Gyro),
            "radial" => Some(GeometryMode::Radial),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeometryMode::Gyro => "gyro",
            GeometryMode::Radial => "radial",
        }
    }
}

/// Raw (pre-activation) scalars controlling the shared ball.
#[derive(Debug, Clone, Copy)]
pub struct BallParams {
    /// Curvature is softplus(c_raw) + CURVATURE_FLOOR.
    pub c_raw: ValueId,
    /// Projection radius is tanh(zeta).
    pub zeta: ValueId,
    /// Residual gate is sigmoid(beta_gate).
    pub beta_gate: ValueId,
}

/// Strictly positive curvature from its raw parameter.
pub fn curvature(tape: &mut Tape, c_raw: ValueId) -> TapeResult<ValueId> {
    let sp = tape.softplus(c_raw)?;
    tape.add_scalar(sp, CURVATURE_FLOOR)
}

/// Scale every row to Euclidean norm tanh(zeta); rows with norm below
/// NORM_EPS map to the zero vector (the ball origin).
pub fn project_to_manifold(tape: &mut Tape, v: ValueId, zeta: ValueId) -> TapeResult<ValueId> {
    let (rows, _) = tape.shape(v);
    let norms = tape.row_norms(v)?;
    let safe = tape.clamp(norms, NORM_EPS, f64::INFINITY)?;
    let inv = tape.recip(safe)?;
    let radius = tape.tanh(zeta)?;
    let unit = tape.scale_rows(v, inv)?;
    let scaled = tape.mul_scalar_t(unit, radius)?;
    // Degenerate rows cannot be normalized; send them to the origin.
    let mask_vals: Vec<f64> = tape
        .value(norms)
        .iter()
        .map(|&n| if n < NORM_EPS { 0.0 } else { 1.0 })
        .collect();
    if mask_vals.iter().any(|&m| m == 0.0) {
        let mask = tape.constant(&crate::tensor::Tensor::from_vec(rows, 1, mask_vals));
        tape.scale_rows(scaled, mask)
    } else {
        Ok(scaled)
    }
}

/// Clamp each row to Euclidean norm at most (1 - BALL_MARGIN)/sqrt(c).
/// Rows already inside are passed through bitwise unchanged.
pub fn clip_to_ball(tape: &mut Tape, x: ValueId, c: ValueId) -> TapeResult<ValueId> {
    let sqrt_c = tape.sqrt(c)?;
    let inv_sqrt_c = tape.recip(sqrt_c)?;
    let limit = tape.mul_scalar(inv_sqrt_c, 1.0 - BALL_MARGIN)?;
    let norms = tape.row_norms(x)?;
    let safe = tape.add_scalar(norms, 1e-30)?;
    let inv_norm = tape.recip(safe)?;
    let ratio = tape.mul_scalar_t(inv_norm, limit)?;
    let factor = tape.clamp(ratio, 0.0, 1.0)?;
    tape.scale_rows(x, factor)
}

/// Row-wise squared norms as an rx1 column.
fn row_sq_norms(tape: &mut Tape, x: ValueId) -> TapeResult<ValueId> {
    let sq = tape.mul(x, x)?;
    tape.row_sums(sq)
}

/// Row-wise inner products <x_i, y_i> as an rx1 column.
fn row_dots(tape: &mut Tape, x: ValueId, y: ValueId) -> TapeResult<ValueId> {
    let prod = tape.mul(x, y)?;
    tape.row_sums(prod)
}

fn check_mobius_denominator(tape: &Tape, den: ValueId) -> TapeResult<()> {
    if let Some(&bad) = tape.value(den).iter().find(|&&v| v.abs() < MOBIUS_DEN_MIN) {
        return Err(TapeError::Domain { op: "mobius", value: bad });
    }
    Ok(())
}

/// Mobius addition x (+)_c y, row-wise.
pub fn mobius_add(tape: &mut Tape, x: ValueId, y: ValueId, c: ValueId) -> TapeResult<ValueId> {
    let xy = row_dots(tape, x, y)?;
    let xx = row_sq_norms(tape, x)?;
    let yy = row_sq_norms(tape, y)?;
    let c2 = tape.mul(c, c)?;
    let cxy2 = {
        let t = tape.mul_scalar_t(xy, c)?;
        tape.mul_scalar(t, 2.0)?
    };
    let cyy = tape.mul_scalar_t(yy, c)?;
    let cxx = tape.mul_scalar_t(xx, c)?;
    // s_x = 1 + 2c<x,y> + c|y|^2 ; s_y = 1 - c|x|^2
    let s_x = {
        let t = tape.add(cxy2, cyy)?;
        tape.add_scalar(t, 1.0)?
    };
    let s_y = {
        let n = tape.neg(cxx)?;
        tape.add_scalar(n, 1.0)?
    };
    let num_x = tape.scale_rows(x, s_x)?;
    let num_y = tape.scale_rows(y, s_y)?;
    let num = tape.add(num_x, num_y)?;
    // den = 1 + 2c<x,y> + c^2 |x|^2 |y|^2
    let xxyy = tape.mul(xx, yy)?;
    let c2xxyy = tape.mul_scalar_t(xxyy, c2)?;
    let den = {
        let t = tape.add(cxy2, c2xxyy)?;
        tape.add_scalar(t, 1.0)?
    };
    check_mobius_denominator(tape, den)?;
    let inv_den = tape.recip(den)?;
    let out = tape.scale_rows(num, inv_den)?;
    // In exact arithmetic the sum stays inside the ball; the clip only
    // guards against rounding at the boundary shell.
    clip_to_ball(tape, out, c)
}

/// Mobius subtraction x (-)_c y in the given mode.
///
/// Gyro mode computes x (+) (-y). Radial mode keeps the positive coupling
/// term (+2c<x,y>) in numerator and denominator, which breaks x (-) x = 0;
/// see the module docs.
pub fn mobius_sub(
    tape: &mut Tape,
    x: ValueId,
    y: ValueId,
    c: ValueId,
    mode: GeometryMode,
) -> TapeResult<ValueId> {
    match mode {
        GeometryMode::Gyro => {
            let ny = tape.neg(y)?;
            mobius_add(tape, x, ny, c)
        }
        GeometryMode::Radial => {
            let xy = row_dots(tape, x, y)?;
            let xx = row_sq_norms(tape, x)?;
            let yy = row_sq_norms(tape, y)?;
            let c2 = tape.mul(c, c)?;
            let cxy2 = {
                let t = tape.mul_scalar_t(xy, c)?;
                tape.mul_scalar(t, 2.0)?
            };
            let cyy = tape.mul_scalar_t(yy, c)?;
            let cxx = tape.mul_scalar_t(xx, c)?;
            let s_x = {
                let t = tape.add(cxy2, cyy)?;
                tape.add_scalar(t, 1.0)?
            };
            let s_y = {
                let n = tape.neg(cxx)?;
                tape.add_scalar(n, 1.0)?
            };
            let num_x = tape.scale_rows(x, s_x)?;
            let num_y = tape.scale_rows(y, s_y)?;
            let num = tape.sub(num_x, num_y)?;
            let xxyy = tape.mul(xx, yy)?;
            let c2xxyy = tape.mul_scalar_t(xxyy, c2)?;
            let den = {
                let t = tape.add(cxy2, c2xxyy)?;
                tape.add_scalar(t, 1.0)?
            };
            check_mobius_denominator(tape, den)?;
            let inv_den = tape.recip(den)?;
            let out = tape.scale_rows(num, inv_den)?;
            // The retained positive coupling can push the raw difference
            // outside the ball, so containment must be restored here.
            clip_to_ball(tape, out, c)
        }
    }
}

/// Exponential map at base points x applied to tangent rows v.
/// Zero tangent rows return the base point unchanged.
pub fn exp_map(
    tape: &mut Tape,
    x: ValueId,
    v: ValueId,
    c: ValueId,
    mode: GeometryMode,
) -> TapeResult<ValueId> {
    let sqrt_c = tape.sqrt(c)?;
    let vnorm = tape.row_norms(v)?;
    let vnorm_safe = tape.clamp(vnorm, 1e-30, f64::INFINITY)?;
    let out = match mode {
        GeometryMode::Gyro => {
            // gamma = tanh(sqrt(c) * lambda_x * |v| / 2), result = x (+) (gamma/(sqrt(c)|v|)) v
            let xx = row_sq_norms(tape, x)?;
            let cxx = tape.mul_scalar_t(xx, c)?;
            let one_m = {
                let n = tape.neg(cxx)?;
                tape.add_scalar(n, 1.0)?
            };
            let lam = {
                let r = tape.recip(one_m)?;
                tape.mul_scalar(r, 2.0)?
            };
            let arg = {
                let ln = tape.mul(lam, vnorm)?;
                let s = tape.mul_scalar_t(ln, sqrt_c)?;
                tape.mul_scalar(s, 0.5)?
            };
            let gamma = tape.tanh(arg)?;
            let denom = tape.mul_scalar_t(vnorm_safe, sqrt_c)?;
            let coef = {
                let inv = tape.recip(denom)?;
                tape.mul(gamma, inv)?
            };
            let w = tape.scale_rows(v, coef)?;
            mobius_add(tape, x, w, c)?
        }
        GeometryMode::Radial => {
            // cosh(sqrt(c)|v|) x + (sinh(sqrt(c)|v|)/(sqrt(c)|v|)) v
            let s = tape.mul_scalar_t(vnorm, sqrt_c)?;
            let a = tape.cosh(s)?;
            let sh = tape.sinh(s)?;
            let denom = tape.mul_scalar_t(vnorm_safe, sqrt_c)?;
            let b = {
                let inv = tape.recip(denom)?;
                tape.mul(sh, inv)?
            };
            let ax = tape.scale_rows(x, a)?;
            let bv = tape.scale_rows(v, b)?;
            tape.add(ax, bv)?
        }
    };
    clip_to_ball(tape, out, c)
}

/// Logarithmic map at base points x of target points y.
/// In gyro mode this is the exact inverse of [`exp_map`]; log_x(x) = 0.
pub fn log_map(
    tape: &mut Tape,
    x: ValueId,
    y: ValueId,
    c: ValueId,
    mode: GeometryMode,
) -> TapeResult<ValueId> {
    let sqrt_c = tape.sqrt(c)?;
    let inv_sqrt_c = tape.recip(sqrt_c)?;
    match mode {
        GeometryMode::Gyro => {
            // d = (-x) (+) y ; result = (2/(sqrt(c) lambda_x)) atanh(sqrt(c)|d|) d/|d|
            let nx = tape.neg(x)?;
            let d = mobius_add(tape, nx, y, c)?;
            let dn = tape.row_norms(d)?;
            let dn_safe = tape.clamp(dn, 1e-30, f64::INFINITY)?;
            let arg = {
                let a = tape.mul_scalar_t(dn, sqrt_c)?;
                tape.clamp(a, -1.0 + ATANH_GUARD, 1.0 - ATANH_GUARD)?
            };
            let at = tape.atanh(arg)?;
            let xx = row_sq_norms(tape, x)?;
            let cxx = tape.mul_scalar_t(xx, c)?;
            let one_m = {
                let n = tape.neg(cxx)?;
                tape.add_scalar(n, 1.0)?
            };
            // 2 / lambda_x = 1 - c|x|^2
            let scale = {
                let s = tape.mul_scalar_t(one_m, inv_sqrt_c)?;
                let inv_dn = tape.recip(dn_safe)?;
                let r = tape.mul(at, inv_dn)?;
                tape.mul(s, r)?
            };
            tape.scale_rows(d, scale)
        }
        GeometryMode::Radial => {
            // d = y (-) x with the radial subtraction; result = (2/sqrt(c)) atanh(sqrt(c)|d|) d/|d|
            let d = mobius_sub(tape, y, x, c, GeometryMode::Radial)?;
            let dn = tape.row_norms(d)?;
            let dn_safe = tape.clamp(dn, 1e-30, f64::INFINITY)?;
            let arg = {
                let a = tape.mul_scalar_t(dn, sqrt_c)?;
                tape.clamp(a, -1.0 + ATANH_GUARD, 1.0 - ATANH_GUARD)?
            };
            let at = tape.atanh(arg)?;
            let coef = {
                let inv_dn = tape.recip(dn_safe)?;
                let r = tape.mul(at, inv_dn)?;
                let s = tape.mul_scalar_t(r, inv_sqrt_c)?;
                tape.mul_scalar(s, 2.0)?
            };
            tape.scale_rows(d, coef)
        }
    }
}

/// Weights of the instance attention block (all d x d).
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub w_q: ValueId,
    pub w_k: ValueId,
    pub w_v: ValueId,
}

/// Self-attention with aggregation in tangent space: linear Q/K/V maps are
/// projected onto the ball, attention weights come from Euclidean Q/K inner
/// products (scaled by 1/sqrt(d)), values are pulled to the tangent space at
/// each query point, averaged, and pushed back with the exponential map.
pub fn riemannian_self_attention(
    tape: &mut Tape,
    v_feat: ValueId,
    w: &AttentionWeights,
    ball: &BallParams,
    mode: GeometryMode,
) -> TapeResult<ValueId> {
    let (n, d) = tape.shape(v_feat);
    let c = curvature(tape, ball.c_raw)?;
    let q_lin = tape.matmul(v_feat, w.w_q)?;
    let k_lin = tape.matmul(v_feat, w.w_k)?;
    let v_lin = tape.matmul(v_feat, w.w_v)?;
    let q_m = {
        let p = project_to_manifold(tape, q_lin, ball.zeta)?;
        clip_to_ball(tape, p, c)?
    };
    let k_m = {
        let p = project_to_manifold(tape, k_lin, ball.zeta)?;
        clip_to_ball(tape, p, c)?
    };
    let v_m = {
        let p = project_to_manifold(tape, v_lin, ball.zeta)?;
        clip_to_ball(tape, p, c)?
    };
    let kt = tape.transpose(k_m)?;
    let logits = {
        let qk = tape.matmul(q_m, kt)?;
        tape.mul_scalar(qk, 1.0 / (d as f64).sqrt())?
    };
    let attn = tape.softmax_rows(logits)?;
    let mut out_rows = Vec::with_capacity(n);
    for m in 0..n {
        let q_row = tape.slice_rows(q_m, m, m + 1)?;
        let q_rep = tape.repeat_rows(q_row, n)?;
        let tangents = log_map(tape, q_rep, v_m, c, mode)?;
        let w_row = tape.slice_rows(attn, m, m + 1)?;
        let pooled = tape.matmul(w_row, tangents)?;
        let mapped = exp_map(tape, q_row, pooled, c, mode)?;
        out_rows.push(mapped);
    }
    tape.concat_rows(&out_rows)
}

/// Gated residual enhancement: sigmoid(beta_gate) blends the layer-normed
/// attention output with the untouched input features.
pub fn rie_forward(
    tape: &mut Tape,
    v_feat: ValueId,
    w: &AttentionWeights,
    ball: &BallParams,
    mode: GeometryMode,
) -> TapeResult<ValueId> {
    let att = riemannian_self_attention(tape, v_feat, w, ball, mode)?;
    let psi = tape.layer_norm_rows(att)?;
    let beta = tape.sigmoid(ball.beta_gate)?;
    let one = tape.constant_scalar(1.0);
    let inv_beta = tape.sub(one, beta)?;
    let gated = tape.mul_scalar_t(psi, beta)?;
    let skip = tape.mul_scalar_t(v_feat, inv_beta)?;
    tape.add(gated, skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::tolerances::{
        BALL_CONTAINMENT_SLACK, EXP_LOG_ROUND_TRIP_TOL, GYRO_IDENTITY_TOL,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs(xs: &[f64]) -> f64 {
        xs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    /// Random points with sqrt(c)|x| <= reach, away from the clamp boundary.
    fn random_points<R: Rng>(rng: &mut R, n: usize, d: usize, c: f64, reach: f64) -> Tensor {
        let mut t = Tensor::randn(rng, n, d, 1.0);
        for i in 0..n {
            let norm = t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let target = reach * rng.gen::<f64>() / c.sqrt();
            let scale = if norm > 0.0 { target / norm } else { 0.0 };
            for j in 0..d {
                let v = t.get(i, j) * scale;
                t.set(i, j, v);
            }
        }
        t
    }

    #[test]
    fn gyro_identities_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &c_val in &[0.1, 1.0, 2.0] {
            let x0 = random_points(&mut rng, 6, 4, c_val, 0.8);
            let y0 = random_points(&mut rng, 6, 4, c_val, 0.8);
            let zero = Tensor::zeros(6, 4);
            let mut tape = Tape::new();
            let c = tape.constant_scalar(c_val);
            let x = tape.constant(&x0);
            let y = tape.constant(&y0);
            let z = tape.constant(&zero);
            let xx = mobius_sub(&mut tape, x, x, c, GeometryMode::Gyro).unwrap();
            assert!(max_abs(tape.value(xx)) <= GYRO_IDENTITY_TOL, "x (-) x = 0 at c={c_val}");
            let xz = mobius_sub(&mut tape, x, z, c, GeometryMode::Gyro).unwrap();
            assert!(
                max_abs_diff(tape.value(xz), x0.data()) <= GYRO_IDENTITY_TOL,
                "x (-) 0 = x at c={c_val}"
            );
            let zy = mobius_sub(&mut tape, z, y, c, GeometryMode::Gyro).unwrap();
            let neg_y: Vec<f64> = y0.data().iter().map(|v| -v).collect();
            assert!(
                max_abs_diff(tape.value(zy), &neg_y) <= GYRO_IDENTITY_TOL,
                "0 (-) y = -y at c={c_val}"
            );
        }
    }

    #[test]
    fn radial_self_subtraction_is_nonzero_by_design() {
        // x = [0.3, 0.4], c = 1: the retained coupling term gives
        // 4c|x|^2 x / (1 + c|x|^2)^2 = 0.64 x instead of 0.
        let mut tape = Tape::new();
        let c = tape.constant_scalar(1.0);
        let x = tape.constant(&Tensor::row(vec![0.3, 0.4]));
        let out = mobius_sub(&mut tape, x, x, c, GeometryMode::Radial).unwrap();
        let expected = [0.64 * 0.3, 0.64 * 0.4];
        assert!(max_abs_diff(tape.value(out), &expected) < 1e-12);
    }

    #[test]
    fn exp_log_round_trips_in_gyro_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &c_val in &[0.1, 1.0, 2.0] {
            let x0 = random_points(&mut rng, 8, 4, c_val, 0.6);
            // Tangent rows with |v| <= 0.5.
            let mut v0 = Tensor::randn(&mut rng, 8, 4, 1.0);
            for i in 0..8 {
                let norm = v0.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                let target = 0.5 * rng.gen::<f64>();
                for j in 0..4 {
                    let val = v0.get(i, j) * target / norm;
                    v0.set(i, j, val);
                }
            }
            let mut tape = Tape::new();
            let c = tape.constant_scalar(c_val);
            let x = tape.constant(&x0);
            let v = tape.constant(&v0);
            let y = exp_map(&mut tape, x, v, c, GeometryMode::Gyro).unwrap();
            let v_back = log_map(&mut tape, x, y, c, GeometryMode::Gyro).unwrap();
            let err = max_abs_diff(tape.value(v_back), v0.data());
            let scale = 1.0f64.max(max_abs(v0.data()));
            assert!(
                err <= EXP_LOG_ROUND_TRIP_TOL * scale,
                "log(exp(v)) != v at c={c_val}: err {err}"
            );
            let y_back = {
                let lg = log_map(&mut tape, x, y, c, GeometryMode::Gyro).unwrap();
                exp_map(&mut tape, x, lg, c, GeometryMode::Gyro).unwrap()
            };
            let err2 = max_abs_diff(tape.value(y_back), tape.value(y));
            assert!(err2 <= EXP_LOG_ROUND_TRIP_TOL, "exp(log(y)) != y at c={c_val}: err {err2}");
        }
    }

    #[test]
    fn log_at_base_point_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random_points(&mut rng, 5, 3, 1.0, 0.7);
        let mut tape = Tape::new();
        let c = tape.constant_scalar(1.0);
        let x = tape.constant(&x0);
        let lg = log_map(&mut tape, x, x, c, GeometryMode::Gyro).unwrap();
        assert!(max_abs(tape.value(lg)) <= GYRO_IDENTITY_TOL);
    }

    #[test]
    fn exp_map_of_zero_tangent_returns_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = random_points(&mut rng, 4, 3, 1.0, 0.5);
        let z = Tensor::zeros(4, 3);
        for mode in [GeometryMode::Gyro, GeometryMode::Radial] {
            let mut tape = Tape::new();
            let c = tape.constant_scalar(1.0);
            let x = tape.constant(&x0);
            let v = tape.constant(&z);
            let y = exp_map(&mut tape, x, v, c, mode).unwrap();
            assert!(
                max_abs_diff(tape.value(y), x0.data()) <= 1e-15,
                "exp_x(0) = x in mode {:?}",
                mode
            );
        }
    }

    #[test]
    fn modes_produce_distinct_exponential_maps() {
        let mut tape = Tape::new();
        let c = tape.constant_scalar(1.0);
        let x = tape.constant(&Tensor::row(vec![0.2, -0.1, 0.05]));
        let v = tape.constant(&Tensor::row(vec![0.3, 0.2, -0.4]));
        let gyro = exp_map(&mut tape, x, v, c, GeometryMode::Gyro).unwrap();
        let radial = exp_map(&mut tape, x, v, c, GeometryMode::Radial).unwrap();
        assert!(
            max_abs_diff(tape.value(gyro), tape.value(radial)) > 1e-3,
            "the two route implementations must stay distinct"
        );
    }

    #[test]
    fn projection_sets_row_norms_to_tanh_zeta() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v0 = Tensor::randn(&mut rng, 6, 5, 2.0);
        let mut tape = Tape::new();
        let zeta = tape.constant_scalar(1.0);
        let v = tape.constant(&v0);
        let p = project_to_manifold(&mut tape, v, zeta).unwrap();
        let expect = 1.0f64.tanh();
        for i in 0..6 {
            let norm = tape.value(p)[i * 5..(i + 1) * 5]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            assert!((norm - expect).abs() <= 1e-12, "row {i} norm {norm} vs {expect}");
        }
    }

    #[test]
    fn projection_sends_zero_rows_to_origin() {
        let mut tape = Tape::new();
        let zeta = tape.constant_scalar(0.8);
        let v = tape.constant(&Tensor::from_vec(2, 3, vec![0.0, 0.0, 0.0, 1.0, 2.0, 2.0]));
        let p = project_to_manifold(&mut tape, v, zeta).unwrap();
        assert_eq!(&tape.value(p)[0..3], &[0.0, 0.0, 0.0]);
        let n1 = tape.value(p)[3..6].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n1 - 0.8f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn clip_keeps_points_inside_the_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &c_val in &[0.5, 1.0, 2.0] {
            let x0 = Tensor::randn(&mut rng, 10, 4, 3.0);
            let mut tape = Tape::new();
            let c = tape.constant_scalar(c_val);
            let x = tape.constant(&x0);
            let clipped = clip_to_ball(&mut tape, x, c).unwrap();
            for i in 0..10 {
                let norm = tape.value(clipped)[i * 4..(i + 1) * 4]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                assert!(
                    c_val.sqrt() * norm <= 1.0 - BALL_MARGIN + BALL_CONTAINMENT_SLACK,
                    "row {i} escaped the ball at c={c_val}"
                );
            }
        }
    }

    #[test]
    fn rie_forward_with_closed_gate_is_bit_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let v0 = Tensor::randn(&mut rng, 4, 6, 0.7);
        let wq0 = Tensor::randn(&mut rng, 6, 6, 0.4);
        let wk0 = Tensor::randn(&mut rng, 6, 6, 0.4);
        let wv0 = Tensor::randn(&mut rng, 6, 6, 0.4);
        let mut tape = Tape::new();
        let ball = BallParams {
            c_raw: tape.constant_scalar(0.54),
            zeta: tape.constant_scalar(0.5),
            // sigmoid(-1000) underflows to exactly 0, closing the gate.
            beta_gate: tape.constant_scalar(-1000.0),
        };
        let v = tape.constant(&v0);
        let w = AttentionWeights {
            w_q: tape.constant(&wq0),
            w_k: tape.constant(&wk0),
            w_v: tape.constant(&wv0),
        };
        let out = rie_forward(&mut tape, v, &w, &ball, GeometryMode::Gyro).unwrap();
        let out_bits: Vec<u64> = tape.value(out).iter().map(|v| v.to_bits()).collect();
        let in_bits: Vec<u64> = v0.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(out_bits, in_bits);
    }

    #[test]
    fn attention_outputs_stay_inside_the_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v0 = Tensor::randn(&mut rng, 5, 4, 1.0);
        let mut tape = Tape::new();
        let ball = BallParams {
            c_raw: tape.constant_scalar(1.2),
            zeta: tape.constant_scalar(1.0),
            beta_gate: tape.constant_scalar(0.0),
        };
        let v = tape.constant(&v0);
        let w = AttentionWeights {
            w_q: tape.constant(&Tensor::randn(&mut rng, 4, 4, 0.5)),
            w_k: tape.constant(&Tensor::randn(&mut rng, 4, 4, 0.5)),
            w_v: tape.constant(&Tensor::randn(&mut rng, 4, 4, 0.5)),
        };
        let att = riemannian_self_attention(&mut tape, v, &w, &ball, GeometryMode::Gyro).unwrap();
        let c_val = {
            let mut t2 = Tape::new();
            let cr = t2.constant_scalar(1.2);
            let c = curvature(&mut t2, cr).unwrap();
            t2.item(c)
        };
        for i in 0..5 {
            let norm = tape.value(att)[i * 4..(i + 1) * 4]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            assert!(c_val.sqrt() * norm <= 1.0 - BALL_MARGIN + BALL_CONTAINMENT_SLACK);
        }
    }
}
