//! Retrieval and localization evaluation: descriptor galleries, composite
//! branch scoring, ranked retrieval, fine-stage positions, and recall tables.

use rayon::prelude::*;

use crate::data::{Query, Submap};
use crate::model::{
    fine_predict, global_point_descriptor, global_text_descriptor, instance_point_descriptors,
    instance_text_descriptors, relation_point_descriptors, relation_text_descriptors,
    ModelParams,
};
use crate::tape::{Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("k={k} exceeds gallery size {gallery}")]
    KTooLarge { k: usize, gallery: usize },
    #[error("tape: {0}")]
    Tape(#[from] TapeError),
}

/// Which branch scores feed the composite ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Combined,
    InstanceOnly,
    RelationOnly,
    GlobalOnly,
}

impl BranchMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "combined" => Some(BranchMode::Combined),
            "instance" => Some(BranchMode::InstanceOnly),
            "relation" => Some(BranchMode::RelationOnly),
            "global" => Some(BranchMode::GlobalOnly),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BranchMode::Combined => "combined",
            BranchMode::InstanceOnly => "instance",
            BranchMode::RelationOnly => "relation",
            BranchMode::GlobalOnly => "global",
        }
    }
}

/// Precomputed descriptors of one gallery submap.
pub struct SubmapDescriptors {
    pub id: u64,
    pub instance: Tensor,
    pub relation: Tensor,
    pub global: Tensor,
}

/// Descriptors of every gallery submap, in input order.
pub struct GalleryIndex {
    pub entries: Vec<SubmapDescriptors>,
}

fn tensor_of(tape: &Tape, id: crate::tape::ValueId) -> Tensor {
    let (r, c) = tape.shape(id);
    Tensor::from_vec(r, c, tape.value(id).to_vec())
}

/// Run all three point-side branches for every submap. Parallel across
/// submaps; output order matches input order.
pub fn index_gallery(
    params: &ModelParams,
    submaps: &[Submap],
) -> Result<GalleryIndex, EvalError> {
    if submaps.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let cfg = &params.config;
    let entries = submaps
        .par_iter()
        .map(|submap| -> Result<SubmapDescriptors, EvalError> {
            let mut tape = Tape::new();
            let ids = params.constants(&mut tape);
            let features = submap.feature_matrix();
            let centroids = submap.centroids();
            let inst =
                instance_point_descriptors(&mut tape, &ids, &features, cfg.geometry)?;
            let rel = relation_point_descriptors(
                &mut tape,
                &ids,
                &features,
                &centroids,
                cfg.integrator,
                cfg.alpha_res,
            )?;
            let glob = global_point_descriptor(&mut tape, &ids, submap)?;
            Ok(SubmapDescriptors {
                id: submap.id,
                instance: tensor_of(&tape, inst),
                relation: tensor_of(&tape, rel),
                global: tensor_of(&tape, glob),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GalleryIndex { entries })
}

/// Text-side descriptors of one query.
pub struct QueryDescriptors {
    pub instance: Tensor,
    pub relation: Tensor,
    pub global: Tensor,
}

pub fn describe_query(
    params: &ModelParams,
    query: &Query,
) -> Result<QueryDescriptors, EvalError> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let ids = params.constants(&mut tape);
    let hints = query.hint_matrix();
    let inst = instance_text_descriptors(&mut tape, &ids, &hints)?;
    let rel =
        relation_text_descriptors(&mut tape, &ids, &hints, cfg.integrator, cfg.alpha_res)?;
    let glob = global_text_descriptor(&mut tape, &ids, query)?;
    Ok(QueryDescriptors {
        instance: tensor_of(&tape, inst),
        relation: tensor_of(&tape, rel),
        global: tensor_of(&tape, glob),
    })
}

fn unit_rows_data(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let norm: f64 = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / norm.max(1e-12);
        for c in 0..x.cols() {
            out.set(r, c, x.get(r, c) * inv);
        }
    }
    out
}

/// Symmetric set-to-set affinity: mean best cosine in both directions,
/// averaged. Mirrors the training-time affinity at inference time.
fn lambda_mean(x: &Tensor, t: &Tensor) -> f64 {
    let xn = unit_rows_data(x);
    let tn = unit_rows_data(t);
    let dir = |a: &Tensor, b: &Tensor| -> f64 {
        let mut acc = 0.0;
        for i in 0..a.rows() {
            let mut best = f64::NEG_INFINITY;
            for j in 0..b.rows() {
                let dot: f64 = a
                    .row_slice(i)
                    .iter()
                    .zip(b.row_slice(j))
                    .map(|(p, q)| p * q)
                    .sum();
                best = best.max(dot);
            }
            acc += best;
        }
        acc / a.rows() as f64
    };
    0.5 * (dir(&xn, &tn) + dir(&tn, &xn))
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let an = unit_rows_data(a);
    let bn = unit_rows_data(b);
    an.data().iter().zip(bn.data()).map(|(p, q)| p * q).sum()
}

/// Raw per-branch scores of one query against every gallery entry:
/// [instance, relation, global].
pub fn branch_scores(gallery: &GalleryIndex, qd: &QueryDescriptors) -> [Vec<f64>; 3] {
    let inst = gallery
        .entries
        .iter()
        .map(|e| lambda_mean(&e.instance, &qd.instance))
        .collect();
    let rel = gallery
        .entries
        .iter()
        .map(|e| lambda_mean(&e.relation, &qd.relation))
        .collect();
    let glob = gallery.entries.iter().map(|e| cosine(&e.global, &qd.global)).collect();
    [inst, rel, glob]
}

/// Standardize scores across the gallery; a degenerate spread maps to all
/// zeros so the branch abstains rather than injecting noise.
pub fn z_normalize(scores: &mut [f64]) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        scores.iter_mut().for_each(|s| *s = 0.0);
    } else {
        scores.iter_mut().for_each(|s| *s = (*s - mean) / std);
    }
}

/// Composite scores under the chosen mode: z-normalize each branch across
/// the gallery, then sum the selected branches.
pub fn combine_scores(branches: &[Vec<f64>; 3], mode: BranchMode) -> Vec<f64> {
    let picked: &[usize] = match mode {
        BranchMode::Combined => &[0, 1, 2],
        BranchMode::InstanceOnly => &[0],
        BranchMode::RelationOnly => &[1],
        BranchMode::GlobalOnly => &[2],
    };
    let n = branches[0].len();
    let mut total = vec![0.0; n];
    for &b in picked {
        let mut z = branches[b].clone();
        z_normalize(&mut z);
        for (t, v) in total.iter_mut().zip(&z) {
            *t += v;
        }
    }
    total
}

fn rank_descending(gallery: &GalleryIndex, scores: &[f64]) -> Vec<(u64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then(gallery.entries[i].id.cmp(&gallery.entries[j].id))
    });
    order.into_iter().map(|i| (gallery.entries[i].id, scores[i])).collect()
}

/// Rank the gallery for one query and keep the top k. Ties break toward the
/// lower submap id.
pub fn coarse_retrieve(
    params: &ModelParams,
    gallery: &GalleryIndex,
    query: &Query,
    k: usize,
    mode: BranchMode,
) -> Result<Vec<(u64, f64)>, EvalError> {
    if gallery.entries.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    if k > gallery.entries.len() {
        return Err(EvalError::KTooLarge { k, gallery: gallery.entries.len() });
    }
    let qd = describe_query(params, query)?;
    let scores = combine_scores(&branch_scores(gallery, &qd), mode);
    let mut ranked = rank_descending(gallery, &scores);
    ranked.truncate(k);
    Ok(ranked)
}

/// Ranked candidates and fine positions for one query.
pub struct RetrievalResult {
    pub query_id: u64,
    /// (submap id, composite score), scores non-increasing.
    pub ranked: Vec<(u64, f64)>,
    /// Fine-stage position per ranked candidate.
    pub fine_positions: Vec<[f64; 2]>,
    /// Convenience: the rank-1 fine position.
    pub predicted: [f64; 2],
}

/// Evaluation controls: recall cutoffs, distance thresholds in meters, and
/// the branch mode under test.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub eps_list: Vec<f64>,
    pub mode: BranchMode,
}

/// Recall tables over one query set.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub mode: BranchMode,
    pub k_list: Vec<usize>,
    pub eps_list: Vec<f64>,
    /// Fraction of queries whose true submap appears in the top k, per k.
    pub retrieval: Vec<f64>,
    /// localization[k_idx][eps_idx]: fraction of queries whose best top-k
    /// fine position lies within eps of the true position.
    pub localization: Vec<Vec<f64>>,
    /// Mean distance of the rank-1 fine position to the true position.
    pub mean_top1_error: f64,
    pub num_queries: usize,
}

/// Rank the whole gallery and run the fine stage for the top `k_max`
/// candidates of each query. Parallel across queries; output sorted by
/// query id.
pub fn retrieve_all(
    params: &ModelParams,
    gallery: &GalleryIndex,
    submaps: &[Submap],
    queries: &[Query],
    k_max: usize,
    mode: BranchMode,
) -> Result<Vec<RetrievalResult>, EvalError> {
    if gallery.entries.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let mut results = queries
        .par_iter()
        .map(|query| -> Result<RetrievalResult, EvalError> {
            let qd = describe_query(params, query)?;
            let scores = combine_scores(&branch_scores(gallery, &qd), mode);
            let mut ranked = rank_descending(gallery, &scores);
            ranked.truncate(k_max);
            let mut tape = Tape::new();
            let ids = params.constants(&mut tape);
            let mut fine_positions = Vec::with_capacity(ranked.len());
            for &(sid, _) in &ranked {
                let submap = submaps
                    .iter()
                    .find(|s| s.id == sid)
                    .expect("gallery ids come from these submaps");
                let pred = fine_predict(&mut tape, &ids, submap, query)?;
                let v = tape.value(pred);
                fine_positions.push([v[0], v[1]]);
            }
            let predicted = fine_positions.first().copied().unwrap_or([f64::NAN; 2]);
            Ok(RetrievalResult { query_id: query.id, ranked, fine_positions, predicted })
        })
        .collect::<Result<Vec<_>, _>>()?;
    results.sort_by_key(|r| r.query_id);
    Ok(results)
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Full evaluation: retrieval recall@k and localization recall@k within each
/// distance threshold. k values larger than the gallery are clamped
/// (exhaustive retrieval).
pub fn evaluate(
    params: &ModelParams,
    submaps: &[Submap],
    queries: &[Query],
    cfg: &EvalConfig,
) -> Result<Metrics, EvalError> {
    let gallery = index_gallery(params, submaps)?;
    let g = gallery.entries.len();
    let ks: Vec<usize> = cfg.k_list.iter().map(|&k| k.min(g)).collect();
    let k_max = ks.iter().copied().max().unwrap_or(1).max(1);
    let results = retrieve_all(params, &gallery, submaps, queries, k_max, cfg.mode)?;

    let by_query_gt: std::collections::BTreeMap<u64, [f64; 2]> =
        queries.iter().map(|q| (q.id, q.gt_pos)).collect();
    let by_query_sub: std::collections::BTreeMap<u64, u64> =
        queries.iter().map(|q| (q.id, q.gt_submap)).collect();

    let n = results.len().max(1) as f64;
    let mut retrieval = vec![0.0; ks.len()];
    let mut localization = vec![vec![0.0; cfg.eps_list.len()]; ks.len()];
    let mut top1_err = 0.0;
    for r in &results {
        let gt_sub = by_query_sub[&r.query_id];
        let gt_pos = by_query_gt[&r.query_id];
        let hit_rank = r.ranked.iter().position(|&(sid, _)| sid == gt_sub);
        top1_err += dist2(r.predicted, gt_pos);
        for (ki, &k) in ks.iter().enumerate() {
            if hit_rank.is_some_and(|rank| rank < k) {
                retrieval[ki] += 1.0;
            }
            let best = r.fine_positions[..k.min(r.fine_positions.len())]
                .iter()
                .map(|&p| dist2(p, gt_pos))
                .fold(f64::INFINITY, f64::min);
            for (ei, &eps) in cfg.eps_list.iter().enumerate() {
                if best <= eps {
                    localization[ki][ei] += 1.0;
                }
            }
        }
    }
    retrieval.iter_mut().for_each(|v| *v /= n);
    localization.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v /= n));
    Ok(Metrics {
        mode: cfg.mode,
        k_list: cfg.k_list.clone(),
        eps_list: cfg.eps_list.clone(),
        retrieval,
        localization,
        mean_top1_error: top1_err / n,
        num_queries: results.len(),
    })
}
