//! Pairwise relation encoding with an information-geometric projection and a
//! leapfrog-style phase update.
//!
//! Edge quantities over n instances are packed as n*n x w matrices where the
//! row for the ordered pair (m, n) sits at index m*n_count + n.

use crate::tape::{Tape, TapeError, TapeResult, ValueId};
use crate::tensor::Tensor;

/// Pairwise edge features: values is an (n*n) x d matrix in pair-row order.
#[derive(Debug, Clone, Copy)]
pub struct EdgeTensor {
    pub values: ValueId,
    pub n: usize,
    pub d: usize,
}

/// Natural-parameter view of the edges: bounded direction theta and a
/// per-edge dispersion eta >= 1.
#[derive(Debug, Clone, Copy)]
pub struct NaturalParams {
    /// (n*n) x d, entries in (-1, 1).
    pub theta: ValueId,
    /// (n*n) x 1, entries >= 1.
    pub eta: ValueId,
    pub n: usize,
}

/// Split phase coordinates after the update step; both are (n*n) x (d/2).
#[derive(Debug, Clone, Copy)]
pub struct PhaseState {
    pub q: ValueId,
    pub p: ValueId,
}

/// Order of the two half-step updates.
///
/// `Euler` advances position with the pre-update momentum (an explicit Euler
/// step whose Jacobian determinant is det(I + dt^2 F)); `Symplectic` uses
/// the freshly updated momentum, making the step volume-preserving
/// (det J = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntegratorVariant {
    #[default]
    Euler,
    Symplectic,
}

impl IntegratorVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euler" => Some(IntegratorVariant::Euler),
            "symplectic" => Some(IntegratorVariant::Symplectic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IntegratorVariant::Euler => "euler",
            IntegratorVariant::Symplectic => "symplectic",
        }
    }
}

/// Pairwise centroid offsets c_m - c_n packed as an (n*n) x 3 matrix.
/// Antisymmetric under pair swap with an exactly-zero diagonal.
pub fn build_offset_tensor(centroids: &[[f64; 3]]) -> Tensor {
    let n = centroids.len();
    let mut data = Vec::with_capacity(n * n * 3);
    for a in centroids {
        for b in centroids {
            data.push(a[0] - b[0]);
            data.push(a[1] - b[1]);
            data.push(a[2] - b[2]);
        }
    }
    Tensor::from_vec(n * n, 3, data)
}

/// Pairwise description offsets: the concatenation [t_m ; t_n] packed as an
/// (n*n) x 2w matrix, serving as the pre-projection relational signal for
/// the text modality.
pub fn build_text_offsets(features: &Tensor) -> Tensor {
    let (n, w) = features.shape();
    let mut data = Vec::with_capacity(n * n * 2 * w);
    for m in 0..n {
        for k in 0..n {
            data.extend_from_slice(features.row_slice(m));
            data.extend_from_slice(features.row_slice(k));
        }
    }
    Tensor::from_vec(n * n, 2 * w, data)
}

/// Row indices of the first / second member of each ordered pair.
fn pair_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut first = Vec::with_capacity(n * n);
    let mut second = Vec::with_capacity(n * n);
    for m in 0..n {
        for k in 0..n {
            first.push(m);
            second.push(k);
        }
    }
    (first, second)
}

/// One-hidden-layer map with tanh on the hidden units: x W1 + b1 -> tanh -> W2 + b2.
#[derive(Debug, Clone, Copy)]
pub struct MlpWeights {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

pub fn mlp_forward(tape: &mut Tape, x: ValueId, w: &MlpWeights) -> TapeResult<ValueId> {
    let h = tape.matmul(x, w.w1)?;
    let hb = tape.add_row_broadcast(h, w.b1)?;
    let ht = tape.tanh(hb)?;
    let o = tape.matmul(ht, w.w2)?;
    tape.add_row_broadcast(o, w.b2)
}

/// Weights of the edge fusion: a geometric projection of the offsets and a
/// fusion over [x_m ; x_n ; geo(offset_mn)].
#[derive(Debug, Clone, Copy)]
pub struct FuseWeights {
    pub geo: MlpWeights,
    pub fuse: MlpWeights,
}

/// Fuse instance features with projected pairwise offsets into edge features.
///
/// `features` is n x w (one instance per row); `offsets` is (n*n) x w_o in
/// pair-row order, typically from [`build_offset_tensor`] or
/// [`build_text_offsets`].
pub fn fuse_edge_features(
    tape: &mut Tape,
    features: ValueId,
    offsets: ValueId,
    w: &FuseWeights,
) -> TapeResult<EdgeTensor> {
    let (n, _) = tape.shape(features);
    let (rows, _) = tape.shape(offsets);
    if rows != n * n {
        return Err(TapeError::BadShape {
            op: "fuse_edge_features",
            expected: "offsets with n*n rows",
            got: tape.shape(offsets),
        });
    }
    let geo = mlp_forward(tape, offsets, &w.geo)?;
    let (first, second) = pair_indices(n);
    let xm = tape.gather_rows(features, &first)?;
    let xn = tape.gather_rows(features, &second)?;
    let cat = tape.concat_cols(&[xm, xn, geo])?;
    let fused = mlp_forward(tape, cat, &w.fuse)?;
    let (_, d) = tape.shape(fused);
    Ok(EdgeTensor { values: fused, n, d })
}

/// Map edges to natural parameters: theta = tanh(E W_eta) stays bounded and
/// eta = 1 + 0.1 |E| acts as a per-edge dispersion, always >= 1.
pub fn info_geometry_project(
    tape: &mut Tape,
    edges: &EdgeTensor,
    w_eta: ValueId,
) -> TapeResult<NaturalParams> {
    let lin = tape.matmul(edges.values, w_eta)?;
    let theta = tape.tanh(lin)?;
    let norms = tape.row_norms(edges.values)?;
    let eta = {
        let s = tape.mul_scalar(norms, 0.1)?;
        tape.add_scalar(s, 1.0)?
    };
    Ok(NaturalParams { theta, eta, n: edges.n })
}

/// Dispersion-weighted distance between two edges' natural parameters:
/// |theta_i - theta_j| / sqrt((eta_i + eta_j) / 2). Diagnostic only; the
/// in-path use of the same geometry is the 1/sqrt(eta) scaling inside
/// [`symplectic_step`].
pub fn fisher_rao_distance(theta: &Tensor, eta: &Tensor, i: usize, j: usize) -> f64 {
    let ti = theta.row_slice(i);
    let tj = theta.row_slice(j);
    let diff: f64 = ti.iter().zip(tj).map(|(a, b)| (a - b) * (a - b)).sum();
    let mean_eta = 0.5 * (eta.data()[i] + eta.data()[j]);
    diff.sqrt() / mean_eta.sqrt()
}

/// Phase-space update on the dispersion-scaled natural parameters.
///
/// theta is scaled by 1/sqrt(eta), split into position q (first d/2
/// channels) and momentum p (last d/2), then advanced one step of size
/// dt = softplus(dt_raw) under the force field tanh(q W_v).
pub fn symplectic_step(
    tape: &mut Tape,
    params: &NaturalParams,
    w_v: ValueId,
    dt_raw: ValueId,
    variant: IntegratorVariant,
) -> TapeResult<PhaseState> {
    let (_, d) = tape.shape(params.theta);
    if d % 2 != 0 {
        return Err(TapeError::BadShape {
            op: "symplectic_step",
            expected: "even channel count for the phase split",
            got: tape.shape(params.theta),
        });
    }
    let sq = tape.sqrt(params.eta)?;
    let inv = tape.recip(sq)?;
    let scaled = tape.scale_rows(params.theta, inv)?;
    let q = tape.slice_cols(scaled, 0, d / 2)?;
    let p = tape.slice_cols(scaled, d / 2, d)?;
    symplectic_step_phase(tape, q, p, w_v, dt_raw, variant)
}

/// The raw phase update on already-split (q, p); exposed so the volume
/// checks can differentiate the map itself.
pub fn symplectic_step_phase(
    tape: &mut Tape,
    q: ValueId,
    p: ValueId,
    w_v: ValueId,
    dt_raw: ValueId,
    variant: IntegratorVariant,
) -> TapeResult<PhaseState> {
    let dt = tape.softplus(dt_raw)?;
    let force = {
        let f = tape.matmul(q, w_v)?;
        tape.tanh(f)?
    };
    let p_next = {
        let step = tape.mul_scalar_t(force, dt)?;
        tape.sub(p, step)?
    };
    let q_next = match variant {
        IntegratorVariant::Euler => {
            let step = tape.mul_scalar_t(p, dt)?;
            tape.add(q, step)?
        }
        IntegratorVariant::Symplectic => {
            let step = tape.mul_scalar_t(p_next, dt)?;
            tape.add(q, step)?
        }
    };
    Ok(PhaseState { q: q_next, p: p_next })
}

/// Residual re-injection of the phase state into the edges, followed by
/// per-edge layer normalization: LN(E + alpha * [q' ; p']).
pub fn residual_enhance(
    tape: &mut Tape,
    edges: &EdgeTensor,
    phase: &PhaseState,
    alpha: f64,
) -> TapeResult<EdgeTensor> {
    let cat = tape.concat_cols(&[phase.q, phase.p])?;
    let scaled = tape.mul_scalar(cat, alpha)?;
    let summed = tape.add(edges.values, scaled)?;
    let out = tape.layer_norm_rows(summed)?;
    Ok(EdgeTensor { values: out, n: edges.n, d: edges.d })
}

/// Per-channel softmax gating over each instance's outgoing edges:
/// x_m[ch] = sum_n softmax_n(E*[m,:,ch]) * E*[m,n,ch]. Returns n x d.
pub fn edge_to_node_aggregate(tape: &mut Tape, edges: &EdgeTensor) -> TapeResult<ValueId> {
    let n = edges.n;
    let mut rows = Vec::with_capacity(n);
    for m in 0..n {
        let block = tape.slice_rows(edges.values, m * n, (m + 1) * n)?;
        let gates = tape.softmax_cols(block)?;
        let gated = tape.mul(gates, block)?;
        let pooled = tape.col_sums(gated)?;
        rows.push(pooled);
    }
    tape.concat_rows(&rows)
}

/// All learnable pieces of the relation encoder for one modality.
#[derive(Debug, Clone, Copy)]
pub struct RelationWeights {
    pub fuse: FuseWeights,
    pub w_eta: ValueId,
    pub w_v: ValueId,
    pub dt_raw: ValueId,
}

/// Full relation pass: fuse -> natural parameters -> phase step -> residual
/// enhancement -> per-node aggregation. Returns n x d node descriptors.
pub fn isre_forward(
    tape: &mut Tape,
    features: ValueId,
    offsets: ValueId,
    w: &RelationWeights,
    variant: IntegratorVariant,
    alpha: f64,
) -> TapeResult<ValueId> {
    let edges = fuse_edge_features(tape, features, offsets, &w.fuse)?;
    let nat = info_geometry_project(tape, &edges, w.w_eta)?;
    let phase = symplectic_step(tape, &nat, w.w_v, w.dt_raw, variant)?;
    let enhanced = residual_enhance(tape, &edges, &phase, alpha)?;
    edge_to_node_aggregate(tape, &enhanced)
}
