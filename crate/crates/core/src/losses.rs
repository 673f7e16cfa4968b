//! Cross-modal alignment scores and the repulsion-only contrastive loss.

use crate::tape::{Tape, TapeError, TapeResult, ValueId};
use crate::tensor::Tensor;
use crate::tolerances::{NORM_EPS, SCALE_FLOOR, SIMILARITY_CLAMP};

/// Row-normalize to unit vectors; a (near-)zero row is an error because the
/// cosine is undefined for it.
pub fn unit_rows(tape: &mut Tape, x: ValueId) -> TapeResult<ValueId> {
    let norms = tape.row_norms(x)?;
    if let Some(&bad) = tape.value(norms).iter().find(|&&n| n < NORM_EPS) {
        return Err(TapeError::Domain { op: "unit_rows", value: bad });
    }
    let inv = tape.recip(norms)?;
    tape.scale_rows(x, inv)
}

/// Asymmetric set-to-set affinity: the mean over rows of `x` of the best
/// cosine similarity against any row of `t`. Returns a scalar node.
pub fn set_to_set_lambda(tape: &mut Tape, x: ValueId, t: ValueId) -> TapeResult<ValueId> {
    let xn = unit_rows(tape, x)?;
    let tn = unit_rows(tape, t)?;
    let tt = tape.transpose(tn)?;
    let cos = tape.matmul(xn, tt)?;
    let best = tape.row_max(cos)?;
    tape.mean(best)
}

/// Average of the two directional softmax normalizations of the affinity
/// matrices at temperature `gamma`, clamped strictly inside (0, 1).
///
/// `l_xt[i][j]` holds the affinity from point-set i to text-set j and
/// `l_tx[i][j]` from text-set i to point-set j; positives sit on the
/// diagonal. Each directional term's rows sum to 1, so rows of the average
/// do too before the boundary clamp; the clamp perturbs a row sum by at most
/// `cols * SIMILARITY_CLAMP` (sharp temperatures underflow losing entries
/// past the floor routinely).
pub fn bidirectional_similarity(
    tape: &mut Tape,
    l_xt: ValueId,
    l_tx: ValueId,
    gamma: f64,
) -> TapeResult<ValueId> {
    let (r, c) = tape.shape(l_xt);
    let (r2, c2) = tape.shape(l_tx);
    if r != c || r2 != c2 || r != r2 {
        return Err(TapeError::ShapeMismatch {
            op: "bidirectional_similarity",
            lhs: (r, c),
            rhs: (r2, c2),
        });
    }
    if gamma <= 0.0 {
        return Err(TapeError::Domain { op: "bidirectional_similarity", value: gamma });
    }
    let sa = {
        let s = tape.mul_scalar(l_xt, 1.0 / gamma)?;
        tape.softmax_rows(s)?
    };
    let sb = {
        let s = tape.mul_scalar(l_tx, 1.0 / gamma)?;
        tape.softmax_rows(s)?
    };
    let avg = {
        let sum = tape.add(sa, sb)?;
        tape.mul_scalar(sum, 0.5)?
    };
    tape.clamp(avg, SIMILARITY_CLAMP, 1.0 - SIMILARITY_CLAMP)
}

/// Pair-similarity of global descriptors: cosine logits at temperature
/// `gamma`, normalized in both directions and averaged, clamped into (0, 1).
pub fn global_similarity(
    tape: &mut Tape,
    p: ValueId,
    q: ValueId,
    gamma: f64,
) -> TapeResult<ValueId> {
    let pn = unit_rows(tape, p)?;
    let qn = unit_rows(tape, q)?;
    let qt = tape.transpose(qn)?;
    let l_pq = tape.matmul(pn, qt)?;
    let l_qp = tape.transpose(l_pq)?;
    bidirectional_similarity(tape, l_pq, l_qp, gamma)
}

/// Where the overlap weight (1 - J)^(1/a) comes from.
pub enum OverlapWeight<'a> {
    /// J = sigmoid(j_raw), one learnable scalar shared by every pair.
    Learnable { j_raw: ValueId },
    /// J_ij given per pair (e.g. footprint overlap); entries in [0, 1].
    /// J = 1 zeroes the pair's weight exactly.
    PerPair { overlap: &'a Tensor },
}

/// Repulsion-only contrastive loss:
/// -(1/B) sum_ij mask_ij (1 - J)^(1/a) log(1 - S_ij)
/// with a = softplus(a_raw) + SCALE_FLOOR.
///
/// `negatives_mask` marks pairs to repel (1.0) and pairs to ignore (0.0);
/// positives, including off-diagonal duplicates of the same scene, must be
/// masked out by the caller. An all-zero mask yields exactly 0.
pub fn negative_repulsion_loss(
    tape: &mut Tape,
    s: ValueId,
    negatives_mask: &Tensor,
    weight: OverlapWeight,
    a_raw: ValueId,
) -> TapeResult<ValueId> {
    let (b, c) = tape.shape(s);
    if b != c {
        return Err(TapeError::BadShape {
            op: "negative_repulsion_loss",
            expected: "square similarity matrix",
            got: (b, c),
        });
    }
    if negatives_mask.shape() != (b, c) {
        return Err(TapeError::ShapeMismatch {
            op: "negative_repulsion_loss",
            lhs: (b, c),
            rhs: negatives_mask.shape(),
        });
    }
    let a = {
        let sp = tape.softplus(a_raw)?;
        tape.add_scalar(sp, SCALE_FLOOR)?
    };
    let inv_a = tape.recip(a)?;
    let coeff = match weight {
        OverlapWeight::Learnable { j_raw } => {
            let j = tape.sigmoid(j_raw)?;
            let one = tape.constant_scalar(1.0);
            let rem = tape.sub(one, j)?;
            let lg = tape.log(rem)?;
            let e = tape.mul(inv_a, lg)?;
            let w = tape.exp(e)?;
            let ones = tape.constant(&Tensor::from_vec(b, c, vec![1.0; b * c]));
            tape.mul_scalar_t(ones, w)?
        }
        OverlapWeight::PerPair { overlap } => {
            if overlap.shape() != (b, c) {
                return Err(TapeError::ShapeMismatch {
                    op: "negative_repulsion_loss",
                    lhs: (b, c),
                    rhs: overlap.shape(),
                });
            }
            if let Some(&bad) =
                overlap.data().iter().find(|&&v| !(0.0..=1.0).contains(&v))
            {
                return Err(TapeError::Domain { op: "negative_repulsion_loss", value: bad });
            }
            let base = Tensor::from_vec(
                b,
                c,
                overlap.data().iter().map(|&j| 1.0 - j).collect(),
            );
            tape.pow_const_base(&base, inv_a)?
        }
    };
    let sc = tape.clamp(s, SIMILARITY_CLAMP, 1.0 - SIMILARITY_CLAMP)?;
    let one_m = {
        let ones = tape.constant(&Tensor::from_vec(b, c, vec![1.0; b * c]));
        tape.sub(ones, sc)?
    };
    let lg = tape.log(one_m)?;
    let mask = tape.constant(negatives_mask);
    let weighted = {
        let cw = tape.mul(coeff, lg)?;
        tape.mul(mask, cw)?
    };
    let total = tape.sum(weighted)?;
    tape.mul_scalar(total, -1.0 / b as f64)
}

/// Off-diagonal mask for batches whose scene ids may repeat: pairs sharing a
/// scene are positives and excluded from repulsion.
pub fn negatives_mask_from_ids(scene_ids: &[u64]) -> Tensor {
    let b = scene_ids.len();
    let mut m = Tensor::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            if i != j && scene_ids[i] != scene_ids[j] {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

/// Softplus floor applied to the learnable scale, exposed for parameter
/// initialization (a_raw such that a = target).
pub fn scale_raw_for(target: f64) -> f64 {
    ((target - SCALE_FLOOR).exp() - 1.0).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_sets_have_unit_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = Tensor::randn(&mut rng, 4, 6, 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(&x0);
        let lam = set_to_set_lambda(&mut tape, x, x).unwrap();
        assert!((tape.item(lam) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_is_invariant_to_the_other_sets_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x0 = Tensor::randn(&mut rng, 3, 5, 1.0);
        let t0 = Tensor::randn(&mut rng, 4, 5, 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut tp = Tensor::zeros(4, 5);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..5 {
                tp.set(dst, c, t0.get(src, c));
            }
        }
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.constant(&x0);
            let tv = tape.constant(t);
            let lam = set_to_set_lambda(&mut tape, x, tv).unwrap();
            tape.item(lam)
        };
        assert!((run(&t0) - run(&tp)).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_in_a_set_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]));
        let t = tape.constant(&Tensor::from_vec(1, 2, vec![0.5, 0.5]));
        assert!(matches!(
            set_to_set_lambda(&mut tape, x, t),
            Err(TapeError::Domain { op: "unit_rows", .. })
        ));
    }

    #[test]
    fn similarity_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let b = 5;
        let mut tape = Tape::new();
        let lxt = tape.constant(&Tensor::randn(&mut rng, b, b, 1.0));
        let ltx = tape.constant(&Tensor::randn(&mut rng, b, b, 1.0));
        let s = bidirectional_similarity(&mut tape, lxt, ltx, 0.07).unwrap();
        let sv = tape.value(s);
        let slack = b as f64 * SIMILARITY_CLAMP + 1e-12;
        for i in 0..b {
            let row_sum: f64 = sv[i * b..(i + 1) * b].iter().sum();
            assert!((row_sum - 1.0).abs() < slack, "row {i} sums to {row_sum}");
        }
        assert!(sv.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_pair_batch_similarity_saturates_at_the_clamp() {
        let mut tape = Tape::new();
        let lxt = tape.constant(&Tensor::scalar(0.8));
        let ltx = tape.constant(&Tensor::scalar(0.4));
        let s = bidirectional_similarity(&mut tape, lxt, ltx, 0.07).unwrap();
        assert_eq!(tape.value(s), &[1.0 - SIMILARITY_CLAMP]);
    }

    #[test]
    fn single_pair_batch_loss_is_exactly_zero() {
        let mut tape = Tape::new();
        let s = tape.constant(&Tensor::scalar(1.0 - SIMILARITY_CLAMP));
        let a_raw = tape.constant_scalar(scale_raw_for(1.0));
        let j_raw = tape.constant_scalar(0.0);
        let mask = negatives_mask_from_ids(&[42]);
        let loss = negative_repulsion_loss(
            &mut tape,
            s,
            &mask,
            OverlapWeight::Learnable { j_raw },
            a_raw,
        )
        .unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn all_positive_batch_loss_is_exactly_zero() {
        // Every query in the batch refers to the same scene: no negatives.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let b = 3;
        let mut tape = Tape::new();
        let lxt = tape.constant(&Tensor::randn(&mut rng, b, b, 1.0));
        let ltx = tape.constant(&Tensor::randn(&mut rng, b, b, 1.0));
        let s = bidirectional_similarity(&mut tape, lxt, ltx, 0.07).unwrap();
        let a_raw = tape.constant_scalar(scale_raw_for(1.0));
        let j_raw = tape.constant_scalar(0.0);
        let mask = negatives_mask_from_ids(&[7, 7, 7]);
        let loss = negative_repulsion_loss(
            &mut tape,
            s,
            &mask,
            OverlapWeight::Learnable { j_raw },
            a_raw,
        )
        .unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn full_overlap_zeroes_a_pairs_contribution_exactly() {
        let mut tape = Tape::new();
        let s = tape.constant(&Tensor::from_vec(2, 2, vec![0.9, 0.5, 0.5, 0.9]));
        let a_raw = tape.constant_scalar(scale_raw_for(1.0));
        // Both off-diagonal pairs fully overlap: the loss must vanish even
        // though the mask marks them as negatives.
        let overlap = Tensor::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let mask = negatives_mask_from_ids(&[1, 2]);
        let loss = negative_repulsion_loss(
            &mut tape,
            s,
            &mask,
            OverlapWeight::PerPair { overlap: &overlap },
            a_raw,
        )
        .unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn two_by_two_hand_value() {
        // Two negatives at similarity 0.5, no overlap, unit scale:
        // -(1/2) * 2 * ln(0.5) = ln 2.
        let mut tape = Tape::new();
        let s = tape.constant(&Tensor::from_vec(2, 2, vec![0.9, 0.5, 0.5, 0.9]));
        let a_raw = tape.constant_scalar(scale_raw_for(1.0));
        let overlap = Tensor::zeros(2, 2);
        let mask = negatives_mask_from_ids(&[1, 2]);
        let loss = negative_repulsion_loss(
            &mut tape,
            s,
            &mask,
            OverlapWeight::PerPair { overlap: &overlap },
            a_raw,
        )
        .unwrap();
        assert!((tape.item(loss) - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn loss_increases_as_a_negative_approaches_one() {
        let eval = |s_neg: f64| -> f64 {
            let mut tape = Tape::new();
            let s = tape.constant(&Tensor::from_vec(2, 2, vec![0.9, s_neg, 0.1, 0.9]));
            let a_raw = tape.constant_scalar(scale_raw_for(1.0));
            let j_raw = tape.constant_scalar(0.0);
            let mask = negatives_mask_from_ids(&[1, 2]);
            let loss = negative_repulsion_loss(
                &mut tape,
                s,
                &mask,
                OverlapWeight::Learnable { j_raw },
                a_raw,
            )
            .unwrap();
            tape.item(loss)
        };
        let a = eval(0.2);
        let b = eval(0.5);
        let c = eval(0.9);
        assert!(a < b && b < c, "loss must grow with negative similarity: {a}, {b}, {c}");
        assert!(a > 0.0);
    }

    #[test]
    fn global_similarity_of_aligned_descriptors_peaks_on_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let p0 = Tensor::randn(&mut rng, 4, 8, 1.0);
        let mut tape = Tape::new();
        let p = tape.constant(&p0);
        let q = tape.constant(&p0);
        let s = global_similarity(&mut tape, p, q, 0.07).unwrap();
        let sv = tape.value(s);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(
                        sv[i * 4 + i] > sv[i * 4 + j],
                        "diagonal dominance at ({i},{j})"
                    );
                }
            }
        }
    }
}
