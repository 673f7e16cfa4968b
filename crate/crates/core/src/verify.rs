//! Runtime self-checking: invariant suites over the geometry, integrator,
//! spectral filter, and losses, plus finite-difference gradient programs
//! covering every tape operation and each branch loss.
//!
//! Every suite measures a worst-case error against an independent oracle and
//! reports it next to the tolerance, so a regression localizes immediately.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Instance, Query, Submap};
use crate::gradcheck::{finite_difference_check, GradCheckReport, ParamIds, ParamMap};
use crate::hyperbolic::{exp_map, log_map, mobius_add, mobius_sub, GeometryMode};
use crate::losses::{negative_repulsion_loss, scale_raw_for, OverlapWeight};
use crate::model::{
    coarse_losses, fine_loss, global_point_descriptor, global_text_descriptor,
    global_batch_loss, instance_batch_loss, relation_batch_loss,
    relation_point_descriptors, CoarsePair, ModelConfig, ModelParams,
};
use crate::reference::{determinant, jacobian, symmetric_eigen, symmetric_matrix_function};
use crate::relation::{symplectic_step_phase, IntegratorVariant};
use crate::spectral::{
    build_similarity_graph, chebyshev_filter_bank, chebyshev_products, scaled_laplacian,
    triple_cross_attention,
};
use crate::tape::{Tape, TapeResult, ValueId};
use crate::tensor::Tensor;
use crate::tolerances::{
    CHEBYSHEV_DIAG_TOL, CHEBYSHEV_ORACLE_TOL, EXP_LOG_ROUND_TRIP_TOL, FD_STEP,
    GYRO_IDENTITY_TOL, PERMUTATION_EQUIVARIANCE_TOL, SYMPLECTIC_DET_TOL,
};

/// One named measurement against its tolerance.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn check(name: &'static str, error: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome { name, error, tolerance, passed: error <= tolerance }
}

fn exact_zero(name: &'static str, value: f64) -> CheckOutcome {
    CheckOutcome { name, error: value.abs(), tolerance: 0.0, passed: value == 0.0 }
}

fn bitwise(name: &'static str, mismatches: usize) -> CheckOutcome {
    CheckOutcome {
        name,
        error: mismatches as f64,
        tolerance: 0.0,
        passed: mismatches == 0,
    }
}

/// A group of related checks reported together.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "suite {}: {}\n",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        for c in &self.checks {
            out.push_str(&format!(
                "  {:<52} err {:>11.3e}  tol {:>9.1e}  {}\n",
                c.name,
                c.error,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize, max_norm: f64) -> Tensor {
    let raw = Tensor::randn(rng, 1, dim, 1.0);
    let norm = raw.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    let scale = rng.gen::<f64>() * max_norm / norm;
    Tensor::row(raw.data().iter().map(|v| v * scale).collect())
}

/// Gyrovector identities, tangent round trips, and ball containment under a
/// long stream of random operations.
pub fn hyperbolic_suite() -> TapeResult<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let dim = 8;
    let curvatures = [0.1f64, 1.0, 2.0];

    let mut identity_err = 0.0f64;
    let mut round_trip_err = 0.0f64;
    for &c_val in &curvatures {
        let radius = 1.0 / c_val.sqrt();
        let mut tape = Tape::new();
        let c = tape.constant(&Tensor::scalar(c_val));
        let zero = tape.constant(&Tensor::zeros(1, dim));
        for _ in 0..50 {
            let xt = random_point(&mut rng, dim, 0.9 * radius);
            let yt = random_point(&mut rng, dim, 0.9 * radius);
            let x = tape.constant(&xt);
            let y = tape.constant(&yt);

            let self_diff = mobius_sub(&mut tape, x, x, c, GeometryMode::Gyro)?;
            identity_err = identity_err.max(max_abs(tape.value(self_diff)));
            let minus_zero = mobius_sub(&mut tape, x, zero, c, GeometryMode::Gyro)?;
            identity_err = identity_err.max(max_diff(tape.value(minus_zero), xt.data()));
            let from_zero = mobius_sub(&mut tape, zero, y, c, GeometryMode::Gyro)?;
            let neg_y: Vec<f64> = yt.data().iter().map(|v| -v).collect();
            identity_err = identity_err.max(max_diff(tape.value(from_zero), &neg_y));

            let base = random_point(&mut rng, dim, 0.8 * radius);
            let vt = random_point(&mut rng, dim, 0.5);
            let bx = tape.constant(&base);
            let v = tape.constant(&vt);
            let fwd = exp_map(&mut tape, bx, v, c, GeometryMode::Gyro)?;
            let back = log_map(&mut tape, bx, fwd, c, GeometryMode::Gyro)?;
            round_trip_err = round_trip_err.max(max_diff(tape.value(back), vt.data()));
        }
    }

    let mut worst_radius = 0.0f64;
    let mut ops_done = 0usize;
    let mut chunk = 0usize;
    while ops_done < 10_000 {
        let c_val = curvatures[chunk % curvatures.len()];
        chunk += 1;
        let radius = 1.0 / c_val.sqrt();
        let mut tape = Tape::new();
        let c = tape.constant(&Tensor::scalar(c_val));
        for _ in 0..250 {
            let xt = random_point(&mut rng, dim, 0.98 * radius);
            let yt = random_point(&mut rng, dim, 0.98 * radius);
            let x = tape.constant(&xt);
            let y = tape.constant(&yt);
            let out = match ops_done % 4 {
                0 => mobius_add(&mut tape, x, y, c)?,
                1 => mobius_sub(&mut tape, x, y, c, GeometryMode::Gyro)?,
                2 => mobius_sub(&mut tape, x, y, c, GeometryMode::Radial)?,
                _ => {
                    let vt = random_point(&mut rng, dim, 0.5);
                    let v = tape.constant(&vt);
                    exp_map(&mut tape, x, v, c, GeometryMode::Gyro)?
                }
            };
            let norm = tape.value(out).iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_radius = worst_radius.max(c_val.sqrt() * norm);
            ops_done += 1;
        }
    }

    Ok(SuiteReport {
        name: "hyperbolic",
        checks: vec![
            check("gyro identities (x-x, x-0, 0-y)", identity_err, GYRO_IDENTITY_TOL),
            check("tangent exp/log round trip", round_trip_err, EXP_LOG_ROUND_TRIP_TOL),
            CheckOutcome {
                name: "ball containment over 10^4 ops (scaled radius)",
                error: worst_radius,
                tolerance: 1.0,
                passed: worst_radius < 1.0,
            },
        ],
    })
}

/// Numeric Jacobian determinants of the phase-space update. The
/// updated-momentum order composes two shears and must preserve volume; the
/// stale-momentum order provably distorts it by det(I + dt^2 F).
pub fn symplectic_suite() -> TapeResult<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut volume_err = 0.0f64;
    let mut stale_err = 0.0f64;
    for draw in 0..20 {
        let half = 1 + draw % 4;
        let dt_target = 0.02 + 0.18 * rng.gen::<f64>();
        let dt_raw = (dt_target.exp() - 1.0).ln();
        let w = Tensor::randn(&mut rng, half, half, 1.0);
        let q0 = Tensor::randn(&mut rng, 1, half, 0.8);
        let p0 = Tensor::randn(&mut rng, 1, half, 0.8);
        let mut state: Vec<f64> = q0.data().to_vec();
        state.extend_from_slice(p0.data());

        // Probe the fallible path once so the closures below cannot fail.
        let dt_eff = {
            let mut tape = Tape::new();
            let q = tape.constant(&q0);
            let p = tape.constant(&p0);
            let wv = tape.constant(&w);
            let raw = tape.constant(&Tensor::scalar(dt_raw));
            symplectic_step_phase(&mut tape, q, p, wv, raw, IntegratorVariant::Symplectic)?;
            let dt = tape.softplus(raw)?;
            tape.item(dt)
        };

        let step_map = |variant: IntegratorVariant| {
            let w = w.clone();
            move |flat: &[f64]| -> Vec<f64> {
                let mut tape = Tape::new();
                let q = tape.constant(&Tensor::row(flat[..half].to_vec()));
                let p = tape.constant(&Tensor::row(flat[half..].to_vec()));
                let wv = tape.constant(&w);
                let raw = tape.constant(&Tensor::scalar(dt_raw));
                let st = symplectic_step_phase(&mut tape, q, p, wv, raw, variant)
                    .expect("shapes were probed above");
                let mut out = tape.value(st.q).to_vec();
                out.extend_from_slice(tape.value(st.p));
                out
            }
        };

        let j_updated = jacobian(step_map(IntegratorVariant::Symplectic), &state);
        volume_err = volume_err.max((determinant(&j_updated) - 1.0).abs());

        let j_stale = jacobian(step_map(IntegratorVariant::Euler), &state);
        let w_f = w.clone();
        let force = move |qf: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let q = tape.constant(&Tensor::row(qf.to_vec()));
            let wv = tape.constant(&w_f);
            let z = tape.matmul(q, wv).expect("shapes were probed above");
            let f = tape.tanh(z).expect("tanh is total");
            tape.value(f).to_vec()
        };
        let f_jac = jacobian(force, q0.data());
        let mut shifted = Tensor::eye(half);
        for r in 0..half {
            for c in 0..half {
                let v = shifted.get(r, c) + dt_eff * dt_eff * f_jac.get(r, c);
                shifted.set(r, c, v);
            }
        }
        stale_err =
            stale_err.max((determinant(&j_stale) - determinant(&shifted)).abs());
    }
    Ok(SuiteReport {
        name: "symplectic",
        checks: vec![
            check("updated-momentum |det J - 1|", volume_err, SYMPLECTIC_DET_TOL),
            check(
                "stale-momentum det J vs det(I + dt^2 F)",
                stale_err,
                SYMPLECTIC_DET_TOL,
            ),
        ],
    })
}

fn mat_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let bc = b.cols();
    let mut out = Tensor::zeros(ar, bc);
    for i in 0..ar {
        for k in 0..ac {
            let av = a.get(i, k);
            for j in 0..bc {
                out.set(i, j, out.get(i, j) + av * b.get(k, j));
            }
        }
    }
    out
}

fn chebyshev_scalar(k: usize, lam: f64) -> f64 {
    (k as f64 * lam.clamp(-1.0, 1.0).acos()).cos()
}

fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Chebyshev recursion and filter bank against the eigendecomposition
/// oracle, plus the diagonal closed form cos(k arccos lambda).
pub fn spectral_suite() -> TapeResult<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let mut recursion_err = 0.0f64;
    let mut bank_err = 0.0f64;
    for &(n, k) in &[(4usize, 3usize), (8, 5), (16, 5), (16, 2)] {
        let raw = Tensor::randn(&mut rng, n, n, 1.0);
        let mut sym = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                sym.set(i, j, 0.5 * (raw.get(i, j) + raw.get(j, i)));
            }
        }
        let (evals, _) = symmetric_eigen(&sym);
        let scale = evals.iter().fold(1.0f64, |m, &l| m.max(l.abs()));
        let mut l = sym.clone();
        for v in l.data_mut() {
            *v /= scale;
        }
        let x = Tensor::randn(&mut rng, n, 4, 1.0);
        let beta = Tensor::randn(&mut rng, 3, k, 0.7);

        let mut tape = Tape::new();
        let lid = tape.constant(&l);
        let xid = tape.constant(&x);
        let bid = tape.constant(&beta);
        let terms = chebyshev_products(&mut tape, lid, xid, k)?;
        let mut oracle_products = Vec::with_capacity(k);
        for (ki, &term) in terms.iter().enumerate() {
            let tk = symmetric_matrix_function(&l, |lam| chebyshev_scalar(ki, lam));
            let want = mat_mul(&tk, &x);
            recursion_err = recursion_err.max(max_diff(tape.value(term), want.data()));
            oracle_products.push(want);
        }

        let bank = chebyshev_filter_bank(&mut tape, lid, xid, bid)?;
        for (b, &branch) in bank.iter().enumerate() {
            let coeffs = softmax_row(beta.row_slice(b));
            let mut want = Tensor::zeros(n, 4);
            for (ki, prod) in oracle_products.iter().enumerate() {
                for (w, p) in want.data_mut().iter_mut().zip(prod.data()) {
                    *w += coeffs[ki] * p;
                }
            }
            bank_err = bank_err.max(max_diff(tape.value(branch), want.data()));
        }
    }

    let mut diag_err = 0.0f64;
    {
        let n = 12;
        let lambdas: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut diag = Tensor::zeros(n, n);
        for (i, &l) in lambdas.iter().enumerate() {
            diag.set(i, i, l);
        }
        let mut tape = Tape::new();
        let lid = tape.constant(&diag);
        let eye = tape.constant(&Tensor::eye(n));
        let terms = chebyshev_products(&mut tape, lid, eye, 5)?;
        for (ki, &term) in terms.iter().enumerate() {
            let got = tape.value(term);
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { chebyshev_scalar(ki, lambdas[i]) } else { 0.0 };
                    diag_err = diag_err.max((got[i * n + j] - want).abs());
                }
            }
        }
    }

    Ok(SuiteReport {
        name: "spectral",
        checks: vec![
            check("recursion vs eigendecomposition", recursion_err, CHEBYSHEV_ORACLE_TOL),
            check("filter bank vs eigendecomposition", bank_err, CHEBYSHEV_ORACLE_TOL),
            check("diagonal closed form cos(k arccos)", diag_err, CHEBYSHEV_DIAG_TOL),
        ],
    })
}

fn fixture_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        text_dim: 10,
        embed_dim: 8,
        cheb_order: 3,
        geometry: GeometryMode::Gyro,
        integrator: IntegratorVariant::Symplectic,
        alpha_res: 0.1,
        gamma: 0.07,
        dt_init: 0.1,
    }
}

/// Two hand-built submaps of exactly four instances each, with one query
/// per submap. Small enough for exhaustive finite differences.
fn fixture_world(cfg: &ModelConfig) -> (Vec<Submap>, Vec<Query>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let feats = Tensor::randn(&mut rng, 8, cfg.feature_dim, 1.0);
    let hint_rows = Tensor::randn(&mut rng, 6, cfg.text_dim, 1.0);
    let submaps: Vec<Submap> = (0..2u64)
        .map(|i| {
            let origin = [20.0 * i as f64, 0.0];
            let instances = (0..4usize)
                .map(|j| Instance {
                    class_id: (i as usize * 4 + j) as u32,
                    centroid: [
                        origin[0] + 2.0 + 1.5 * j as f64,
                        2.0 + 1.2 * j as f64,
                        0.5 + 0.3 * j as f64,
                    ],
                    feature: feats.row_slice(i as usize * 4 + j).to_vec(),
                })
                .collect();
            Submap { id: i + 1, origin, side: 10.0, instances }
        })
        .collect();
    let queries: Vec<Query> = (0..2u64)
        .map(|i| Query {
            id: 100 + i,
            hints: (0..3)
                .map(|j| hint_rows.row_slice(i as usize * 3 + j).to_vec())
                .collect(),
            gt_submap: i + 1,
            gt_pos: [20.0 * i as f64 + 5.0, 5.0],
        })
        .collect();
    (submaps, queries)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..t.cols() {
            out.set(dst, c, t.get(src, c));
        }
    }
    out
}

/// Relation and spectral stages commute with input reordering; the global
/// descriptors are bitwise invariant thanks to the canonical sort.
pub fn permutation_suite() -> TapeResult<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let cfg = fixture_config();
    let params = ModelParams::init(cfg.clone(), 0x5eed_0006).expect("fixture config is valid");
    let (submaps, queries) = fixture_world(&cfg);

    // Relation stage: permuting instances permutes descriptors.
    let n = 5;
    let feats = Tensor::randn(&mut rng, n, cfg.feature_dim, 1.0);
    let cents: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                4.0 * rng.gen::<f64>(),
                4.0 * rng.gen::<f64>(),
                2.0 * rng.gen::<f64>(),
            ]
        })
        .collect();
    let perm = [3usize, 0, 4, 2, 1];
    let base = {
        let mut tape = Tape::new();
        let ids = params.constants(&mut tape);
        let out = relation_point_descriptors(
            &mut tape,
            &ids,
            &feats,
            &cents,
            cfg.integrator,
            cfg.alpha_res,
        )?;
        tape.tensor(out)
    };
    let permuted = {
        let pf = permute_rows(&feats, &perm);
        let pc: Vec<[f64; 3]> = perm.iter().map(|&i| cents[i]).collect();
        let mut tape = Tape::new();
        let ids = params.constants(&mut tape);
        let out = relation_point_descriptors(
            &mut tape,
            &ids,
            &pf,
            &pc,
            cfg.integrator,
            cfg.alpha_res,
        )?;
        tape.tensor(out)
    };
    let mut relation_err = 0.0f64;
    for (dst, &src) in perm.iter().enumerate() {
        relation_err =
            relation_err.max(max_diff(permuted.row_slice(dst), base.row_slice(src)));
    }

    // Spectral stage through the fused attention: same property.
    let xs = Tensor::randn(&mut rng, 6, cfg.embed_dim, 1.0);
    let beta = Tensor::randn(&mut rng, 3, 4, 0.5);
    let sperm = [5usize, 2, 0, 4, 1, 3];
    let run_chain = |input: &Tensor| -> TapeResult<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.constant(input);
        let tau = tape.constant(&Tensor::scalar(1.3));
        let bid = tape.constant(&beta);
        let graph = build_similarity_graph(&mut tape, xid, tau)?;
        let lap = scaled_laplacian(&mut tape, &graph)?;
        let [y1, y2, y3] = chebyshev_filter_bank(&mut tape, lap, xid, bid)?;
        let fused = triple_cross_attention(&mut tape, y1, y2, y3)?;
        Ok(tape.tensor(fused))
    };
    let base_s = run_chain(&xs)?;
    let perm_s = run_chain(&permute_rows(&xs, &sperm))?;
    let mut spectral_err = 0.0f64;
    for (dst, &src) in sperm.iter().enumerate() {
        spectral_err =
            spectral_err.max(max_diff(perm_s.row_slice(dst), base_s.row_slice(src)));
    }

    // Global descriptors: canonical sorting makes reordering invisible.
    let describe_point = |submap: &Submap| -> TapeResult<Vec<u64>> {
        let mut tape = Tape::new();
        let ids = params.constants(&mut tape);
        let out = global_point_descriptor(&mut tape, &ids, submap)?;
        Ok(tape.value(out).iter().map(|v| v.to_bits()).collect())
    };
    let mut rotated = submaps[0].clone();
    rotated.instances.rotate_left(2);
    rotated.instances.swap(0, 1);
    let point_mismatches = describe_point(&submaps[0])?
        .iter()
        .zip(describe_point(&rotated)?.iter())
        .filter(|(a, b)| a != b)
        .count();

    let describe_text = |query: &Query| -> TapeResult<Vec<u64>> {
        let mut tape = Tape::new();
        let ids = params.constants(&mut tape);
        let out = global_text_descriptor(&mut tape, &ids, query)?;
        Ok(tape.value(out).iter().map(|v| v.to_bits()).collect())
    };
    let mut shuffled = queries[0].clone();
    shuffled.hints.rotate_left(1);
    let text_mismatches = describe_text(&queries[0])?
        .iter()
        .zip(describe_text(&shuffled)?.iter())
        .filter(|(a, b)| a != b)
        .count();

    Ok(SuiteReport {
        name: "permutation",
        checks: vec![
            check(
                "relation descriptors are equivariant",
                relation_err,
                PERMUTATION_EQUIVARIANCE_TOL,
            ),
            check(
                "spectral attention chain is equivariant",
                spectral_err,
                PERMUTATION_EQUIVARIANCE_TOL,
            ),
            bitwise("global point descriptor ignores order (bitwise)", point_mismatches),
            bitwise("global text descriptor ignores order (bitwise)", text_mismatches),
        ],
    })
}

/// Loss well-definedness: finite values and gradients at every batch size,
/// and the two exact-zero collapse cases.
pub fn loss_suite() -> TapeResult<SuiteReport> {
    let cfg = fixture_config();
    let params = ModelParams::init(cfg.clone(), 0x5eed_0007).expect("fixture config is valid");
    let (submaps, queries) = fixture_world(&cfg);

    let mut finite_failures = 0usize;
    for b in 1..=8usize {
        let pairs: Vec<CoarsePair> = (0..b)
            .map(|i| CoarsePair { submap: &submaps[i % 2], query: &queries[(i + 1) % 2] })
            .collect();
        let mut tape = Tape::new();
        let ids = params.leaves(&mut tape);
        match coarse_losses(&mut tape, &ids, &pairs, &cfg) {
            Ok(losses) => {
                let total = losses.total(&mut tape)?;
                let fine = fine_loss(&mut tape, &ids, &pairs)?;
                let grand = tape.add(total, fine)?;
                if !tape.item(grand).is_finite() {
                    finite_failures += 1;
                }
                tape.backward(grand)?;
                let any_bad_grad = ids.values().any(|&id| {
                    tape.grad(id).is_some_and(|g| g.iter().any(|v| !v.is_finite()))
                });
                if any_bad_grad {
                    finite_failures += 1;
                }
            }
            // The tape rejects non-finite intermediates by erroring, so an
            // error here counts as a well-definedness failure.
            Err(_) => finite_failures += 1,
        }
    }

    // Every pair positive: the negatives mask empties and all three branch
    // losses must collapse to exactly zero.
    let all_positive: Vec<CoarsePair> = (0..3)
        .map(|_| CoarsePair { submap: &submaps[0], query: &queries[0] })
        .collect();
    let mut tape = Tape::new();
    let ids = params.constants(&mut tape);
    let zero_losses = coarse_losses(&mut tape, &ids, &all_positive, &cfg)?;
    let zero_worst = [zero_losses.instance, zero_losses.relation, zero_losses.global]
        .iter()
        .map(|&id| tape.item(id))
        .fold(0.0f64, |m, v| if v == 0.0 { m } else { m.max(v.abs()).max(1.0) });

    // Full overlap: (1 - J)^(1/a) with J = 1 must remove every penalty term.
    let mut tape = Tape::new();
    let logits = tape.constant(&Tensor::randn(
        &mut ChaCha8Rng::seed_from_u64(0x5eed_0008),
        3,
        3,
        1.0,
    ));
    let s = tape.sigmoid(logits)?;
    let mask = Tensor::from_vec(3, 3, vec![0., 1., 1., 1., 0., 1., 1., 1., 0.]);
    let ones = Tensor::from_vec(3, 3, vec![1.0; 9]);
    let a_raw = tape.constant(&Tensor::scalar(scale_raw_for(1.0)));
    let full = negative_repulsion_loss(
        &mut tape,
        s,
        &mask,
        OverlapWeight::PerPair { overlap: &ones },
        a_raw,
    )?;
    let full_overlap_value = tape.item(full);

    Ok(SuiteReport {
        name: "losses",
        checks: vec![
            CheckOutcome {
                name: "finite losses and gradients for B in 1..=8",
                error: finite_failures as f64,
                tolerance: 0.0,
                passed: finite_failures == 0,
            },
            exact_zero("all-positive batch yields exactly zero", zero_worst),
            exact_zero("full overlap yields exactly zero", full_overlap_value),
        ],
    })
}

/// The invariant suites behind the `verify` subcommand, in report order.
pub fn run_invariant_suites() -> TapeResult<Vec<SuiteReport>> {
    Ok(vec![
        hyperbolic_suite()?,
        symplectic_suite()?,
        spectral_suite()?,
        permutation_suite()?,
        loss_suite()?,
    ])
}

/// A named scalar program whose reverse-mode gradients are compared against
/// central finite differences over every parameter coordinate.
pub struct GradProgram {
    pub name: &'static str,
    pub params: ParamMap,
    pub build: Box<dyn Fn(&mut Tape, &ParamIds) -> TapeResult<ValueId> + Send + Sync>,
}

pub fn run_gradient_program(p: &GradProgram) -> TapeResult<GradCheckReport> {
    finite_difference_check(&p.build, &p.params, FD_STEP)
}

fn name_seed(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Reduce any output to a scalar with deterministic per-coordinate weights,
/// so every coordinate's gradient path is distinct.
fn wsum(tape: &mut Tape, out: ValueId, name: &str) -> TapeResult<ValueId> {
    let (r, c) = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(name));
    let w = tape.constant(&Tensor::randn(&mut rng, r, c, 1.0));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn prog<F>(name: &'static str, params: Vec<(&'static str, Tensor)>, build: F) -> GradProgram
where
    F: Fn(&mut Tape, &ParamIds) -> TapeResult<ValueId> + Send + Sync + 'static,
{
    GradProgram {
        name,
        params: params.into_iter().map(|(k, t)| (k.to_string(), t)).collect(),
        build: Box::new(build),
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(
        r,
        c,
        (0..r * c).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect(),
    )
}

/// One finite-difference program per differentiable tape operation, with
/// inputs kept away from kinks and domain edges.
pub fn op_gradient_programs() -> Vec<GradProgram> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_000a);
    let g = |rng: &mut ChaCha8Rng, r, c| Tensor::randn(rng, r, c, 1.0);

    let mut programs = Vec::new();

    let x = g(&mut rng, 3, 4);
    let y = g(&mut rng, 3, 4);
    programs.push(prog("add", vec![("x", x.clone()), ("y", y.clone())], |t, ids| {
        let o = t.add(ids["x"], ids["y"])?;
        wsum(t, o, "add")
    }));
    programs.push(prog("sub", vec![("x", x.clone()), ("y", y.clone())], |t, ids| {
        let o = t.sub(ids["x"], ids["y"])?;
        wsum(t, o, "sub")
    }));
    programs.push(prog("mul", vec![("x", x.clone()), ("y", y)], |t, ids| {
        let o = t.mul(ids["x"], ids["y"])?;
        wsum(t, o, "mul")
    }));
    programs.push(prog("neg", vec![("x", x.clone())], |t, ids| {
        let o = t.neg(ids["x"])?;
        wsum(t, o, "neg")
    }));
    programs.push(prog("add_scalar", vec![("x", x.clone())], |t, ids| {
        let o = t.add_scalar(ids["x"], 0.7)?;
        wsum(t, o, "add_scalar")
    }));
    programs.push(prog("mul_scalar", vec![("x", x.clone())], |t, ids| {
        let o = t.mul_scalar(ids["x"], -1.3)?;
        wsum(t, o, "mul_scalar")
    }));
    programs.push(prog(
        "mul_scalar_t",
        vec![("x", x.clone()), ("s", Tensor::scalar(0.8))],
        |t, ids| {
            let o = t.mul_scalar_t(ids["x"], ids["s"])?;
            wsum(t, o, "mul_scalar_t")
        },
    ));
    programs.push(prog(
        "matmul",
        vec![("x", g(&mut rng, 3, 4)), ("y", g(&mut rng, 4, 2))],
        |t, ids| {
            let o = t.matmul(ids["x"], ids["y"])?;
            wsum(t, o, "matmul")
        },
    ));
    programs.push(prog("transpose", vec![("x", x.clone())], |t, ids| {
        let o = t.transpose(ids["x"])?;
        wsum(t, o, "transpose")
    }));
    programs.push(prog(
        "concat_rows",
        vec![("x", g(&mut rng, 2, 3)), ("y", g(&mut rng, 3, 3))],
        |t, ids| {
            let o = t.concat_rows(&[ids["x"], ids["y"]])?;
            wsum(t, o, "concat_rows")
        },
    ));
    programs.push(prog(
        "concat_cols",
        vec![("x", g(&mut rng, 3, 2)), ("y", g(&mut rng, 3, 3))],
        |t, ids| {
            let o = t.concat_cols(&[ids["x"], ids["y"]])?;
            wsum(t, o, "concat_cols")
        },
    ));
    programs.push(prog("slice_rows", vec![("x", g(&mut rng, 4, 3))], |t, ids| {
        let o = t.slice_rows(ids["x"], 1, 3)?;
        wsum(t, o, "slice_rows")
    }));
    programs.push(prog("slice_cols", vec![("x", g(&mut rng, 3, 5))], |t, ids| {
        let o = t.slice_cols(ids["x"], 2, 5)?;
        wsum(t, o, "slice_cols")
    }));
    programs.push(prog("gather_rows", vec![("x", g(&mut rng, 4, 3))], |t, ids| {
        let o = t.gather_rows(ids["x"], &[2, 0, 2, 1])?;
        wsum(t, o, "gather_rows")
    }));
    programs.push(prog("repeat_rows", vec![("x", g(&mut rng, 1, 4))], |t, ids| {
        let o = t.repeat_rows(ids["x"], 3)?;
        wsum(t, o, "repeat_rows")
    }));
    programs.push(prog("repeat_cols", vec![("x", g(&mut rng, 3, 1))], |t, ids| {
        let o = t.repeat_cols(ids["x"], 4)?;
        wsum(t, o, "repeat_cols")
    }));

    programs.push(prog("tanh", vec![("x", x.clone())], |t, ids| {
        let o = t.tanh(ids["x"])?;
        wsum(t, o, "tanh")
    }));
    programs.push(prog("sigmoid", vec![("x", x.clone())], |t, ids| {
        let o = t.sigmoid(ids["x"])?;
        wsum(t, o, "sigmoid")
    }));
    programs.push(prog("softplus", vec![("x", x.clone())], |t, ids| {
        let o = t.softplus(ids["x"])?;
        wsum(t, o, "softplus")
    }));
    programs.push(prog("exp", vec![("x", Tensor::randn(&mut rng, 3, 4, 0.5))], |t, ids| {
        let o = t.exp(ids["x"])?;
        wsum(t, o, "exp")
    }));
    programs.push(prog("cosh", vec![("x", Tensor::randn(&mut rng, 3, 4, 0.5))], |t, ids| {
        let o = t.cosh(ids["x"])?;
        wsum(t, o, "cosh")
    }));
    programs.push(prog("sinh", vec![("x", Tensor::randn(&mut rng, 3, 4, 0.5))], |t, ids| {
        let o = t.sinh(ids["x"])?;
        wsum(t, o, "sinh")
    }));
    programs.push(prog("log", vec![("x", uniform(&mut rng, 3, 4, 0.5, 2.0))], |t, ids| {
        let o = t.log(ids["x"])?;
        wsum(t, o, "log")
    }));
    programs.push(prog("sqrt", vec![("x", uniform(&mut rng, 3, 4, 0.5, 2.0))], |t, ids| {
        let o = t.sqrt(ids["x"])?;
        wsum(t, o, "sqrt")
    }));
    programs.push(prog("recip", vec![("x", uniform(&mut rng, 3, 4, 0.5, 2.0))], |t, ids| {
        let o = t.recip(ids["x"])?;
        wsum(t, o, "recip")
    }));
    programs.push(prog("atanh", vec![("x", uniform(&mut rng, 3, 4, -0.8, 0.8))], |t, ids| {
        let o = t.atanh(ids["x"])?;
        wsum(t, o, "atanh")
    }));
    let mut abs_in = uniform(&mut rng, 3, 4, 0.3, 1.0);
    for v in abs_in.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    programs.push(prog("abs", vec![("x", abs_in)], |t, ids| {
        let o = t.abs(ids["x"])?;
        wsum(t, o, "abs")
    }));
    let mut clamp_in = uniform(&mut rng, 3, 4, -1.0, 1.0);
    for v in clamp_in.data_mut() {
        if (v.abs() - 0.5).abs() < 2e-3 {
            *v += 5e-3;
        }
    }
    programs.push(prog("clamp", vec![("x", clamp_in)], |t, ids| {
        let o = t.clamp(ids["x"], -0.5, 0.5)?;
        wsum(t, o, "clamp")
    }));

    programs.push(prog("row_norms", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let o = t.row_norms(ids["x"])?;
        wsum(t, o, "row_norms")
    }));
    programs.push(prog("row_sums", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let o = t.row_sums(ids["x"])?;
        wsum(t, o, "row_sums")
    }));
    programs.push(prog("col_sums", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let o = t.col_sums(ids["x"])?;
        wsum(t, o, "col_sums")
    }));
    programs.push(prog("row_means", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let o = t.row_means(ids["x"])?;
        wsum(t, o, "row_means")
    }));
    programs.push(prog("col_means", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let o = t.col_means(ids["x"])?;
        wsum(t, o, "col_means")
    }));
    let spread = Tensor::from_vec(3, 4, vec![
        0.1, 0.9, -0.4, 0.3, //
        1.2, 0.2, 0.7, -0.8, //
        -0.5, -1.1, 0.6, 0.0,
    ]);
    programs.push(prog("row_max", vec![("x", spread.clone())], |t, ids| {
        let o = t.row_max(ids["x"])?;
        wsum(t, o, "row_max")
    }));
    programs.push(prog("reduce_max", vec![("x", spread)], |t, ids| {
        t.reduce_max(ids["x"])
    }));
    programs.push(prog("sum", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let h = t.tanh(ids["x"])?;
        t.sum(h)
    }));
    programs.push(prog("mean", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let h = t.tanh(ids["x"])?;
        t.mean(h)
    }));

    programs.push(prog("softmax_rows", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let o = t.softmax_rows(ids["x"])?;
        wsum(t, o, "softmax_rows")
    }));
    programs.push(prog("softmax_cols", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let o = t.softmax_cols(ids["x"])?;
        wsum(t, o, "softmax_cols")
    }));
    programs.push(prog("layer_norm_rows", vec![("x", g(&mut rng, 3, 4))], |t, ids| {
        let o = t.layer_norm_rows(ids["x"])?;
        wsum(t, o, "layer_norm_rows")
    }));
    programs.push(prog(
        "scale_rows",
        vec![("x", g(&mut rng, 3, 4)), ("s", g(&mut rng, 3, 1))],
        |t, ids| {
            let o = t.scale_rows(ids["x"], ids["s"])?;
            wsum(t, o, "scale_rows")
        },
    ));
    programs.push(prog(
        "scale_cols",
        vec![("x", g(&mut rng, 3, 4)), ("s", g(&mut rng, 1, 4))],
        |t, ids| {
            let o = t.scale_cols(ids["x"], ids["s"])?;
            wsum(t, o, "scale_cols")
        },
    ));
    programs.push(prog(
        "add_row_broadcast",
        vec![("x", g(&mut rng, 3, 4)), ("row", g(&mut rng, 1, 4))],
        |t, ids| {
            let o = t.add_row_broadcast(ids["x"], ids["row"])?;
            wsum(t, o, "add_row_broadcast")
        },
    ));
    programs.push(prog(
        "pow_const_base",
        vec![("e", Tensor::scalar(1.7))],
        |t, ids| {
            let base = Tensor::from_vec(2, 2, vec![0.5, 1.2, 2.0, 0.0]);
            let o = t.pow_const_base(&base, ids["e"])?;
            wsum(t, o, "pow_const_base")
        },
    ));

    programs
}

fn branch_program(
    name: &'static str,
    prefix: &'static str,
    all: &ParamMap,
    cfg: ModelConfig,
    submaps: Vec<Submap>,
    queries: Vec<Query>,
    pick: fn(&mut Tape, &ParamIds, &[CoarsePair], &ModelConfig) -> TapeResult<ValueId>,
) -> GradProgram {
    let live: ParamMap = all
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    let frozen: ParamMap = all
        .iter()
        .filter(|(k, _)| !k.starts_with(prefix))
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    GradProgram {
        name,
        params: live,
        build: Box::new(move |tape, ids| {
            let mut merged = ids.clone();
            for (k, t) in &frozen {
                merged.insert(k.clone(), tape.constant(t));
            }
            let pairs: Vec<CoarsePair> = submaps
                .iter()
                .zip(&queries)
                .map(|(s, q)| CoarsePair { submap: s, query: q })
                .collect();
            pick(tape, &merged, &pairs, &cfg)
        }),
    }
}

/// Full-branch loss programs: each differentiates one branch loss with
/// respect to every parameter of that branch, holding the rest constant.
pub fn branch_gradient_programs() -> Vec<GradProgram> {
    let cfg = fixture_config();
    let params = ModelParams::init(cfg.clone(), 0x5eed_0009).expect("fixture config is valid");
    let (submaps, queries) = fixture_world(&cfg);
    vec![
        branch_program(
            "instance branch loss",
            "inst.",
            &params.values,
            cfg.clone(),
            submaps.clone(),
            queries.clone(),
            instance_batch_loss,
        ),
        branch_program(
            "relation branch loss",
            "rel.",
            &params.values,
            cfg.clone(),
            submaps.clone(),
            queries.clone(),
            relation_batch_loss,
        ),
        branch_program(
            "global branch loss",
            "glob.",
            &params.values,
            cfg.clone(),
            submaps.clone(),
            queries.clone(),
            global_batch_loss,
        ),
        branch_program(
            "fine position loss",
            "fine.",
            &params.values,
            cfg,
            submaps,
            queries,
            |t, ids, pairs, _| fine_loss(t, ids, pairs),
        ),
    ]
}

/// Every gradient program: op-level first, then the branch losses.
pub fn gradient_programs() -> Vec<GradProgram> {
    let mut all = op_gradient_programs();
    all.extend(branch_gradient_programs());
    all
}
