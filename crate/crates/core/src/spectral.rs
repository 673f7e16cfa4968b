//! Global descriptors from spectral graph filtering.
//!
//! Pipeline: instance features -> similarity graph -> rescaled normalized
//! Laplacian -> three Chebyshev filter branches -> combined cross-attention
//! -> sequence encoding into a single descriptor row. The matching language
//! descriptor is produced by attention pooling over description features.
//!
//! The Chebyshev recursion never materializes an eigendecomposition; the
//! spectral-domain route exists only in `reference` as a check.

use crate::tape::{Tape, TapeError, TapeResult, ValueId};
use crate::tensor::Tensor;
use crate::tolerances::GRAPH_NORM_EPS;

/// Gaussian similarity graph over instance rows.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityGraph {
    /// exp(-|x_m - x_n|^2 / tau) + I; diagonal entries are exactly 2.
    pub adjacency: ValueId,
    /// Row-normalized adjacency (rows sum to ~1).
    pub normalized: ValueId,
    pub n: usize,
}

/// Build the similarity graph; `tau` must be a positive scalar node.
pub fn build_similarity_graph(
    tape: &mut Tape,
    x: ValueId,
    tau: ValueId,
) -> TapeResult<SimilarityGraph> {
    let (n, _) = tape.shape(x);
    let xt = tape.transpose(x)?;
    let gram = tape.matmul(x, xt)?;
    let sq = tape.mul(x, x)?;
    let r = tape.row_sums(sq)?;
    let rt = tape.transpose(r)?;
    // |x_m - x_n|^2 = r_m + r_n - 2 <x_m, x_n>; the diagonal cancels exactly
    // because the same accumulation order produces both r_m and gram_mm.
    let d2 = {
        let a = tape.repeat_cols(r, n)?;
        let b = tape.repeat_rows(rt, n)?;
        let s = tape.add(a, b)?;
        let g2 = tape.mul_scalar(gram, 2.0)?;
        tape.sub(s, g2)?
    };
    let adjacency = {
        let inv_tau = tape.recip(tau)?;
        let scaled = tape.mul_scalar_t(d2, inv_tau)?;
        let neg = tape.neg(scaled)?;
        let e = tape.exp(neg)?;
        let eye = tape.constant(&Tensor::eye(n));
        tape.add(e, eye)?
    };
    let normalized = {
        let sums = tape.row_sums(adjacency)?;
        let guarded = tape.add_scalar(sums, GRAPH_NORM_EPS)?;
        let inv = tape.recip(guarded)?;
        tape.scale_rows(adjacency, inv)?
    };
    Ok(SimilarityGraph { adjacency, normalized, n })
}

/// Normalized Laplacian of the row-normalized graph, rescaled by its largest
/// absolute entry so every coefficient sits in [-1, 1].
pub fn scaled_laplacian(tape: &mut Tape, graph: &SimilarityGraph) -> TapeResult<ValueId> {
    let n = graph.n;
    let deg = tape.row_sums(graph.normalized)?;
    let inv_sqrt = {
        let s = tape.sqrt(deg)?;
        tape.recip(s)?
    };
    let sym = {
        let left = tape.scale_rows(graph.normalized, inv_sqrt)?;
        let inv_row = tape.transpose(inv_sqrt)?;
        tape.scale_cols(left, inv_row)?
    };
    let lap = {
        let eye = tape.constant(&Tensor::eye(n));
        tape.sub(eye, sym)?
    };
    let scale = {
        let a = tape.abs(lap)?;
        let m = tape.reduce_max(a)?;
        let g = tape.add_scalar(m, GRAPH_NORM_EPS)?;
        tape.recip(g)?
    };
    tape.mul_scalar_t(lap, scale)
}

/// Chebyshev polynomial products T_k(L) X for k = 0..order-1 via the
/// three-term recursion T_{k+1} = 2 L T_k - T_{k-1}.
pub fn chebyshev_products(
    tape: &mut Tape,
    laplacian: ValueId,
    x: ValueId,
    order: usize,
) -> TapeResult<Vec<ValueId>> {
    if order == 0 {
        return Err(TapeError::EmptyInput { op: "chebyshev_products" });
    }
    let mut terms = Vec::with_capacity(order);
    terms.push(x);
    if order > 1 {
        let t1 = tape.matmul(laplacian, x)?;
        terms.push(t1);
        for k in 2..order {
            let lt = tape.matmul(laplacian, terms[k - 1])?;
            let two = tape.mul_scalar(lt, 2.0)?;
            let next = tape.sub(two, terms[k - 2])?;
            terms.push(next);
        }
    }
    Ok(terms)
}

/// Three filter branches with per-branch softmax-normalized coefficients.
/// `beta` is a 3 x order coefficient matrix; returns [Y1, Y2, Y3].
pub fn chebyshev_filter_bank(
    tape: &mut Tape,
    laplacian: ValueId,
    x: ValueId,
    beta: ValueId,
) -> TapeResult<[ValueId; 3]> {
    let (branches, order) = tape.shape(beta);
    if branches != 3 {
        return Err(TapeError::BadShape {
            op: "chebyshev_filter_bank",
            expected: "3 x order coefficients",
            got: (branches, order),
        });
    }
    let coeffs = tape.softmax_rows(beta)?;
    let terms = chebyshev_products(tape, laplacian, x, order)?;
    let mut out = Vec::with_capacity(3);
    for b in 0..3 {
        let row = tape.slice_rows(coeffs, b, b + 1)?;
        let mut acc: Option<ValueId> = None;
        for (k, &term) in terms.iter().enumerate() {
            let ck = tape.slice_cols(row, k, k + 1)?;
            let scaled = tape.mul_scalar_t(term, ck)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        out.push(acc.expect("order >= 1"));
    }
    Ok([out[0], out[1], out[2]])
}

/// Combine the three branches: two row-softmax attention maps anchored at
/// the third branch are fused by elementwise product and renormalized.
/// A fully-underflowed row falls back to uniform weights.
pub fn triple_cross_attention(
    tape: &mut Tape,
    y1: ValueId,
    y2: ValueId,
    y3: ValueId,
) -> TapeResult<ValueId> {
    let (n, d) = tape.shape(y3);
    let scale = 1.0 / (d as f64).sqrt();
    let omega = |tape: &mut Tape, other: ValueId| -> TapeResult<ValueId> {
        let t = tape.transpose(other)?;
        let logits = tape.matmul(y3, t)?;
        let scaled = tape.mul_scalar(logits, scale)?;
        tape.softmax_rows(scaled)
    };
    let o1 = omega(tape, y1)?;
    let o2 = omega(tape, y2)?;
    let comb = tape.mul(o1, o2)?;
    let sums = tape.row_sums(comb)?;
    // Softmax outputs are positive, so a zero row can only arise from
    // underflow of every product in the row; substitute uniform weights.
    let needs_fallback: Vec<bool> =
        tape.value(sums).iter().map(|&s| s < 1e-300).collect();
    let comb = if needs_fallback.iter().any(|&f| f) {
        let mut fill = Tensor::zeros(n, n);
        for (i, &f) in needs_fallback.iter().enumerate() {
            if f {
                for j in 0..n {
                    fill.set(i, j, 1.0 / n as f64);
                }
            }
        }
        let fill = tape.constant(&fill);
        tape.add(comb, fill)?
    } else {
        comb
    };
    let weights = {
        let sums2 = tape.row_sums(comb)?;
        let inv = tape.recip(sums2)?;
        tape.scale_rows(comb, inv)?
    };
    tape.matmul(weights, y3)
}

/// Gate weights of one recurrent direction.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_xz: ValueId,
    pub w_hz: ValueId,
    pub b_z: ValueId,
    pub w_xr: ValueId,
    pub w_hr: ValueId,
    pub b_r: ValueId,
    pub w_xh: ValueId,
    pub w_hh: ValueId,
    pub b_h: ValueId,
}

fn gru_step(
    tape: &mut Tape,
    x: ValueId,
    h: ValueId,
    w: &GruWeights,
) -> TapeResult<ValueId> {
    let z = {
        let a = tape.matmul(x, w.w_xz)?;
        let b = tape.matmul(h, w.w_hz)?;
        let s = tape.add(a, b)?;
        let sb = tape.add_row_broadcast(s, w.b_z)?;
        tape.sigmoid(sb)?
    };
    let r = {
        let a = tape.matmul(x, w.w_xr)?;
        let b = tape.matmul(h, w.w_hr)?;
        let s = tape.add(a, b)?;
        let sb = tape.add_row_broadcast(s, w.b_r)?;
        tape.sigmoid(sb)?
    };
    let cand = {
        let a = tape.matmul(x, w.w_xh)?;
        let rh = tape.mul(r, h)?;
        let b = tape.matmul(rh, w.w_hh)?;
        let s = tape.add(a, b)?;
        let sb = tape.add_row_broadcast(s, w.b_h)?;
        tape.tanh(sb)?
    };
    // h' = (1 - z) * h + z * cand
    let (_, hd) = tape.shape(h);
    let ones = tape.constant(&Tensor::from_vec(1, hd, vec![1.0; hd]));
    let inv_z = tape.sub(ones, z)?;
    let keep = tape.mul(inv_z, h)?;
    let take = tape.mul(z, cand)?;
    tape.add(keep, take)
}

/// Single-head encoder block over the recurrent states.
#[derive(Debug, Clone, Copy)]
pub struct EncoderWeights {
    pub w_q: ValueId,
    pub w_k: ValueId,
    pub w_v: ValueId,
    pub w_o: ValueId,
    pub ffn_w1: ValueId,
    pub ffn_b1: ValueId,
    pub ffn_w2: ValueId,
    pub ffn_b2: ValueId,
}

fn encoder_block(tape: &mut Tape, s: ValueId, w: &EncoderWeights) -> TapeResult<ValueId> {
    let (_, width) = tape.shape(s);
    let q = tape.matmul(s, w.w_q)?;
    let k = tape.matmul(s, w.w_k)?;
    let v = tape.matmul(s, w.w_v)?;
    let kt = tape.transpose(k)?;
    let logits = {
        let qk = tape.matmul(q, kt)?;
        tape.mul_scalar(qk, 1.0 / (width as f64).sqrt())?
    };
    let attn = tape.softmax_rows(logits)?;
    let mixed = {
        let av = tape.matmul(attn, v)?;
        tape.matmul(av, w.w_o)?
    };
    let s1 = {
        let r = tape.add(s, mixed)?;
        tape.layer_norm_rows(r)?
    };
    let ffn = {
        let h = tape.matmul(s1, w.ffn_w1)?;
        let hb = tape.add_row_broadcast(h, w.ffn_b1)?;
        let ht = tape.tanh(hb)?;
        let o = tape.matmul(ht, w.ffn_w2)?;
        tape.add_row_broadcast(o, w.ffn_b2)?
    };
    let r2 = tape.add(s1, ffn)?;
    tape.layer_norm_rows(r2)
}

/// Weights of the whole sequence head.
#[derive(Debug, Clone, Copy)]
pub struct SequenceWeights {
    pub forward: GruWeights,
    pub backward: GruWeights,
    pub encoder: EncoderWeights,
}

/// Reduce combined instance features (one canonical-ordered row per
/// instance) to a single descriptor row.
///
/// A bidirectional recurrent pass (hidden width = feature width) produces
/// per-position states, an encoder block mixes them, the terminal forward
/// state (last position, first half) and terminal backward state (first
/// position, second half) are concatenated, and every 2nd unit is kept to
/// return to the input width.
///
/// The caller is responsible for canonical ordering; given that, the output
/// is bitwise independent of the original instance order.
pub fn encode_point_global(
    tape: &mut Tape,
    kappa: ValueId,
    w: &SequenceWeights,
) -> TapeResult<ValueId> {
    let (n, d) = tape.shape(kappa);
    let h0 = tape.constant(&Tensor::zeros(1, d));
    let mut fwd_states = Vec::with_capacity(n);
    let mut h = h0;
    for t in 0..n {
        let x = tape.slice_rows(kappa, t, t + 1)?;
        h = gru_step(tape, x, h, &w.forward)?;
        fwd_states.push(h);
    }
    let mut bwd_states = vec![h0; n];
    let mut hb = h0;
    for t in (0..n).rev() {
        let x = tape.slice_rows(kappa, t, t + 1)?;
        hb = gru_step(tape, x, hb, &w.backward)?;
        bwd_states[t] = hb;
    }
    let fwd = tape.concat_rows(&fwd_states)?;
    let bwd = tape.concat_rows(&bwd_states)?;
    let states = tape.concat_cols(&[fwd, bwd])?;
    let encoded = encoder_block(tape, states, &w.encoder)?;
    // Terminal states: forward half of the last position, backward half of
    // the first position.
    let last = tape.slice_rows(encoded, n - 1, n)?;
    let first = tape.slice_rows(encoded, 0, 1)?;
    let fin_f = tape.slice_cols(last, 0, d)?;
    let fin_b = tape.slice_cols(first, d, 2 * d)?;
    let fin = tape.concat_cols(&[fin_f, fin_b])?;
    // Strided dimension reduction 2d -> d: keep even-indexed units.
    let fin_t = tape.transpose(fin)?;
    let idx: Vec<usize> = (0..d).map(|i| 2 * i).collect();
    let sampled = tape.gather_rows(fin_t, &idx)?;
    tape.transpose(sampled)
}

/// Attention pooling of description features into one row:
/// a = softmax(w tanh(T W_p)), output = sum_j a_j T_j.
pub fn pool_language_global(
    tape: &mut Tape,
    t_feat: ValueId,
    w_p: ValueId,
    w: ValueId,
) -> TapeResult<ValueId> {
    let proj = {
        let l = tape.matmul(t_feat, w_p)?;
        tape.tanh(l)?
    };
    let wt = tape.transpose(w)?;
    let scores = tape.matmul(proj, wt)?;
    let attn = tape.softmax_cols(scores)?;
    let at = tape.transpose(attn)?;
    tape.matmul(at, t_feat)
}
