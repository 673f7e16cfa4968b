//! Independent numeric oracles used by the verification suites: a dense
//! symmetric eigensolver, an LU determinant, and a central-difference
//! Jacobian. Deliberately written against plain `Tensor` data, with no tape
//! involvement, so they cannot share bugs with the differentiable path.

use crate::tensor::Tensor;
use crate::tolerances::FD_STEP;

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues (ascending) and the matching orthonormal eigenvectors
/// as columns of `vectors`.
///
/// Panics if the input is not square. Symmetry is assumed; only the upper
/// triangle drives the rotations.
pub fn symmetric_eigen(a: &Tensor) -> (Vec<f64>, Tensor) {
    let (n, m) = a.shape();
    assert_eq!(n, m, "symmetric_eigen needs a square matrix, got {n}x{m}");
    let mut d = a.clone();
    let mut v = Tensor::eye(n);
    // Off-diagonal mass shrinks quadratically per sweep; 50 sweeps is far
    // beyond what any matrix here needs to hit f64 roundoff.
    for _ in 0..50 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += d.get(p, q).abs();
            }
        }
        if off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = d.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = d.get(p, p);
                let aqq = d.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // Smaller-magnitude root of t^2 + 2*theta*t - 1 = 0 keeps the
                // rotation angle below pi/4 for stability.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let dkp = d.get(k, p);
                    let dkq = d.get(k, q);
                    d.set(k, p, c * dkp - s * dkq);
                    d.set(k, q, s * dkp + c * dkq);
                }
                for k in 0..n {
                    let dpk = d.get(p, k);
                    let dqk = d.get(q, k);
                    d.set(p, k, c * dpk - s * dqk);
                    d.set(q, k, s * dpk + c * dqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| d.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]));
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Tensor::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.get(k, src));
        }
    }
    (values, vectors)
}

/// Apply a scalar function to a symmetric matrix through its
/// eigendecomposition: f(A) = V f(Lambda) V^T.
pub fn symmetric_matrix_function(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let (values, vectors) = symmetric_eigen(a);
    let n = values.len();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vectors.get(i, k) * f(values[k]) * vectors.get(j, k);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Determinant by LU factorization with partial pivoting.
/// Panics if the input is not square.
pub fn determinant(a: &Tensor) -> f64 {
    let (n, m) = a.shape();
    assert_eq!(n, m, "determinant needs a square matrix, got {n}x{m}");
    let mut lu = a.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if lu.get(r, col).abs() > lu.get(pivot, col).abs() {
                pivot = r;
            }
        }
        if lu.get(pivot, col) == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..n {
                let tmp = lu.get(col, c);
                lu.set(col, c, lu.get(pivot, c));
                lu.set(pivot, c, tmp);
            }
            det = -det;
        }
        let p = lu.get(col, col);
        det *= p;
        for r in (col + 1)..n {
            let factor = lu.get(r, col) / p;
            for c in col..n {
                lu.set(r, c, lu.get(r, c) - factor * lu.get(col, c));
            }
        }
    }
    det
}

/// Central-difference Jacobian of `f: R^n -> R^m` at `x`, step `FD_STEP`.
/// Row i holds the gradient of output i.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Tensor {
    let n = x.len();
    let m = f(x).len();
    let mut j = Tensor::zeros(m, n);
    let mut probe = x.to_vec();
    for col in 0..n {
        probe[col] = x[col] + FD_STEP;
        let hi = f(&probe);
        probe[col] = x[col] - FD_STEP;
        let lo = f(&probe);
        probe[col] = x[col];
        assert_eq!(hi.len(), m, "output arity changed under perturbation");
        for row in 0..m {
            j.set(row, col, (hi[row] - lo[row]) / (2.0 * FD_STEP));
        }
    }
    j
}
