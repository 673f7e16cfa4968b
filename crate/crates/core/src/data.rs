//! Scene and query data: domain types, the line-delimited dataset file, and
//! the deterministic synthetic generator that stands in for real perception
//! backbones.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// File format version written into the header line.
pub const DATASET_VERSION: u32 = 1;

/// Number of quantized compass sectors used for the direction part of a hint.
pub const DIRECTION_SECTORS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("first line must be the header record")]
    MissingHeader,
    #[error("line {line}: unexpected second header")]
    UnexpectedHeader { line: usize },
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

/// One detected object: semantic class, 3D centroid in meters, and the
/// feature vector a perception backbone would emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "class")]
    pub class_id: u32,
    pub centroid: [f64; 3],
    pub feature: Vec<f64>,
}

/// A square map cell and the instances inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submap {
    pub id: u64,
    /// Lower-left corner of the cell footprint, meters.
    pub origin: [f64; 2],
    /// Cell side length, meters.
    pub side: f64,
    pub instances: Vec<Instance>,
}

impl Submap {
    /// Cell center; the reference point fine predictions offset from.
    pub fn anchor(&self) -> [f64; 2] {
        [self.origin[0] + 0.5 * self.side, self.origin[1] + 0.5 * self.side]
    }

    pub fn contains_xy(&self, p: [f64; 2]) -> bool {
        p[0] >= self.origin[0]
            && p[0] <= self.origin[0] + self.side
            && p[1] >= self.origin[1]
            && p[1] <= self.origin[1] + self.side
    }

    /// Instance features stacked row-wise.
    pub fn feature_matrix(&self) -> Tensor {
        let n = self.instances.len();
        let d = self.instances.first().map_or(0, |i| i.feature.len());
        let mut data = Vec::with_capacity(n * d);
        for inst in &self.instances {
            data.extend_from_slice(&inst.feature);
        }
        Tensor::from_vec(n, d, data)
    }

    pub fn centroids(&self) -> Vec<[f64; 3]> {
        self.instances.iter().map(|i| i.centroid).collect()
    }
}

/// A localization request: hint vectors standing in for encoded relational
/// descriptions, plus ground truth for training and scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub hints: Vec<Vec<f64>>,
    pub gt_submap: u64,
    pub gt_pos: [f64; 2],
}

impl Query {
    /// Hint vectors stacked row-wise.
    pub fn hint_matrix(&self) -> Tensor {
        let m = self.hints.len();
        let d = self.hints.first().map_or(0, |h| h.len());
        let mut data = Vec::with_capacity(m * d);
        for h in &self.hints {
            data.extend_from_slice(h);
        }
        Tensor::from_vec(m, d, data)
    }
}

/// Dimensions recorded in the file header; train/val query counts let the
/// flat record stream be split back without per-record tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDims {
    pub feature_dim: usize,
    pub text_dim: usize,
    pub num_classes: usize,
    pub num_train: usize,
    pub num_val: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub dims: DatasetDims,
    pub submaps: Vec<Submap>,
    pub train: Vec<Query>,
    pub val: Vec<Query>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Header { version: u32, seed: u64, dims: DatasetDims },
    Submap(Submap),
    Query(Query),
}

impl Dataset {
    pub fn submap_by_id(&self, id: u64) -> Option<&Submap> {
        self.submaps.iter().find(|s| s.id == id)
    }

    /// Write as line-delimited records: header, submaps, train queries, val
    /// queries. Byte-identical for identical datasets.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Record::Header {
            version: DATASET_VERSION,
            seed: self.seed,
            dims: self.dims,
        };
        serde_json::to_writer(&mut w, &header)
            .map_err(|source| DataError::Parse { line: 1, source })?;
        w.write_all(b"\n")?;
        let mut line = 2usize;
        for s in &self.submaps {
            serde_json::to_writer(&mut w, &Record::Submap(s.clone()))
                .map_err(|source| DataError::Parse { line, source })?;
            w.write_all(b"\n")?;
            line += 1;
        }
        for q in self.train.iter().chain(self.val.iter()) {
            serde_json::to_writer(&mut w, &Record::Query(q.clone()))
                .map_err(|source| DataError::Parse { line, source })?;
            w.write_all(b"\n")?;
            line += 1;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, DataError> {
        let reader = BufReader::new(File::open(path)?);
        let mut header: Option<(u64, DatasetDims)> = None;
        let mut submaps = Vec::new();
        let mut queries = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line)
                .map_err(|source| DataError::Parse { line: idx + 1, source })?;
            match record {
                Record::Header { version, seed, dims } => {
                    if header.is_some() {
                        return Err(DataError::UnexpectedHeader { line: idx + 1 });
                    }
                    if idx != 0 {
                        return Err(DataError::MissingHeader);
                    }
                    if version != DATASET_VERSION {
                        return Err(DataError::Validation(format!(
                            "unsupported version {version}"
                        )));
                    }
                    header = Some((seed, dims));
                }
                Record::Submap(s) => {
                    if header.is_none() {
                        return Err(DataError::MissingHeader);
                    }
                    submaps.push(s);
                }
                Record::Query(q) => {
                    if header.is_none() {
                        return Err(DataError::MissingHeader);
                    }
                    queries.push(q);
                }
            }
        }
        let (seed, dims) = header.ok_or(DataError::MissingHeader)?;
        if queries.len() != dims.num_train + dims.num_val {
            return Err(DataError::Validation(format!(
                "header promises {} queries, file has {}",
                dims.num_train + dims.num_val,
                queries.len()
            )));
        }
        let val = queries.split_off(dims.num_train);
        let ds = Dataset { seed, dims, submaps, train: queries, val };
        ds.validate()?;
        Ok(ds)
    }

    /// Structural checks shared by load and by tests on generated data.
    pub fn validate(&self) -> Result<(), DataError> {
        let d = &self.dims;
        let mut seen_submaps = std::collections::BTreeSet::new();
        for s in &self.submaps {
            if !seen_submaps.insert(s.id) {
                return Err(DataError::Validation(format!("duplicate submap id {}", s.id)));
            }
            if s.instances.is_empty() {
                return Err(DataError::Validation(format!("submap {} has no instances", s.id)));
            }
            if !(s.side > 0.0 && s.side.is_finite()) {
                return Err(DataError::Validation(format!("submap {} bad side", s.id)));
            }
            for inst in &s.instances {
                if inst.feature.len() != d.feature_dim {
                    return Err(DataError::Validation(format!(
                        "submap {}: feature width {} != {}",
                        s.id,
                        inst.feature.len(),
                        d.feature_dim
                    )));
                }
                if inst.class_id as usize >= d.num_classes {
                    return Err(DataError::Validation(format!(
                        "submap {}: class {} out of range",
                        s.id, inst.class_id
                    )));
                }
                if !s.contains_xy([inst.centroid[0], inst.centroid[1]]) {
                    return Err(DataError::Validation(format!(
                        "submap {}: centroid outside footprint",
                        s.id
                    )));
                }
                if inst.centroid.iter().chain(inst.feature.iter()).any(|v| !v.is_finite()) {
                    return Err(DataError::Validation(format!(
                        "submap {}: non-finite value",
                        s.id
                    )));
                }
            }
        }
        let mut seen_queries = std::collections::BTreeSet::new();
        for q in self.train.iter().chain(self.val.iter()) {
            if !seen_queries.insert(q.id) {
                return Err(DataError::Validation(format!("duplicate query id {}", q.id)));
            }
            if q.hints.is_empty() {
                return Err(DataError::Validation(format!("query {} has no hints", q.id)));
            }
            for h in &q.hints {
                if h.len() != d.text_dim {
                    return Err(DataError::Validation(format!(
                        "query {}: hint width {} != {}",
                        q.id,
                        h.len(),
                        d.text_dim
                    )));
                }
                if h.iter().any(|v| !v.is_finite()) {
                    return Err(DataError::Validation(format!(
                        "query {}: non-finite hint",
                        q.id
                    )));
                }
            }
            if self.submap_by_id(q.gt_submap).is_none() {
                return Err(DataError::Validation(format!(
                    "query {}: unknown gt submap {}",
                    q.id, q.gt_submap
                )));
            }
            if q.gt_pos.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Validation(format!(
                    "query {}: non-finite gt position",
                    q.id
                )));
            }
        }
        Ok(())
    }
}

/// Intersection-over-union of two axis-aligned square cell footprints.
pub fn iou_overlap(a: &Submap, b: &Submap) -> f64 {
    let ix = (a.origin[0] + a.side).min(b.origin[0] + b.side) - a.origin[0].max(b.origin[0]);
    let iy = (a.origin[1] + a.side).min(b.origin[1] + b.side) - a.origin[1].max(b.origin[1]);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.side * a.side + b.side * b.side - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Total order over instances used wherever sequence models need a canonical
/// arrangement: centroid lexicographic, then class, then feature rows.
pub fn canonical_instance_order(submap: &Submap) -> Vec<usize> {
    let mut order: Vec<usize> = (0..submap.instances.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &submap.instances[i];
        let b = &submap.instances[j];
        for axis in 0..3 {
            let c = a.centroid[axis].total_cmp(&b.centroid[axis]);
            if c != std::cmp::Ordering::Equal {
                return c;
            }
        }
        a.class_id
            .cmp(&b.class_id)
            .then_with(|| lex_cmp(&a.feature, &b.feature))
    });
    order
}

/// Total order over a query's hints (lexicographic on the vectors).
pub fn canonical_hint_order(query: &Query) -> Vec<usize> {
    let mut order: Vec<usize> = (0..query.hints.len()).collect();
    order.sort_by(|&i, &j| lex_cmp(&query.hints[i], &query.hints[j]));
    order
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        let c = x.total_cmp(y);
        if c != std::cmp::Ordering::Equal {
            return c;
        }
    }
    a.len().cmp(&b.len())
}

/// Synthetic world controls. Submaps tile a `grid_cols`-wide grid of square
/// cells; queries describe sampled instance subsets of one submap.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    pub num_submaps: usize,
    pub grid_cols: usize,
    pub cell_side: f64,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_hints: usize,
    pub max_hints: usize,
    pub num_train: usize,
    pub num_val: usize,
    /// Std-dev of the Gaussian added to every hint coordinate.
    pub noise_sigma: f64,
    /// Relative spread of instance features around their class prototype.
    pub feature_jitter: f64,
    /// Partition the class vocabulary across submaps so class identity alone
    /// suffices for retrieval (used by baseline checks).
    pub disjoint_classes: bool,
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.num_submaps == 0 {
            return fail("num_submaps must be >= 1".into());
        }
        if self.grid_cols == 0 {
            return fail("grid_cols must be >= 1".into());
        }
        if !(self.cell_side > 0.0 && self.cell_side.is_finite()) {
            return fail(format!("cell_side must be positive, got {}", self.cell_side));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be >= 1".into());
        }
        if self.feature_dim < 3 {
            return fail(format!(
                "feature_dim must be >= 3 (two slots carry position), got {}",
                self.feature_dim
            ));
        }
        if self.text_dim <= DIRECTION_SECTORS {
            return fail(format!(
                "text_dim must exceed the {DIRECTION_SECTORS} direction slots, got {}",
                self.text_dim
            ));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return fail(format!(
                "instance range [{}, {}] invalid",
                self.min_instances, self.max_instances
            ));
        }
        if self.min_hints == 0 || self.min_hints > self.max_hints {
            return fail(format!(
                "hint range [{}, {}] invalid",
                self.min_hints, self.max_hints
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.feature_jitter >= 0.0 && self.feature_jitter.is_finite()) {
            return fail(format!(
                "feature_jitter must be >= 0, got {}",
                self.feature_jitter
            ));
        }
        if self.disjoint_classes && self.num_classes < self.num_submaps {
            return fail(format!(
                "disjoint classes need num_classes >= num_submaps ({} < {})",
                self.num_classes, self.num_submaps
            ));
        }
        Ok(())
    }
}

/// The frozen embedding tables a run's hints and features are drawn from.
/// Regenerable from the config alone: the generator draws these first, so a
/// fresh RNG with the same seed reproduces them exactly.
pub struct SynthesisTables {
    /// num_classes x feature_dim class prototypes.
    pub class_features: Tensor,
    /// num_classes x (text_dim - DIRECTION_SECTORS) class text embeddings.
    pub class_text: Tensor,
    /// DIRECTION_SECTORS x DIRECTION_SECTORS sector embeddings.
    pub direction_text: Tensor,
}

fn draw_tables(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> SynthesisTables {
    let f_std = 1.0 / (cfg.feature_dim as f64).sqrt();
    let class_part = cfg.text_dim - DIRECTION_SECTORS;
    let t_std = 1.0 / (class_part as f64).sqrt();
    let d_std = 1.0 / (DIRECTION_SECTORS as f64).sqrt();
    SynthesisTables {
        class_features: Tensor::randn(rng, cfg.num_classes, cfg.feature_dim, f_std),
        class_text: Tensor::randn(rng, cfg.num_classes, class_part, t_std),
        direction_text: Tensor::randn(rng, DIRECTION_SECTORS, DIRECTION_SECTORS, d_std),
    }
}

pub fn synthesis_tables(cfg: &GenConfig) -> Result<SynthesisTables, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(draw_tables(&mut rng, cfg))
}

/// Compass sector of the direction from `from` to `to` in the ground plane.
fn direction_sector(from: [f64; 3], to: [f64; 3]) -> usize {
    let angle = (to[1] - from[1]).atan2(to[0] - from[0]);
    let frac = (angle + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
    ((frac * DIRECTION_SECTORS as f64).floor() as usize) % DIRECTION_SECTORS
}

/// Deterministic synthetic world: class-prototype features with jitter, and
/// hints built from class text embeddings concatenated with the quantized
/// direction to each described instance's nearest neighbor, plus noise.
///
/// The last two feature slots additionally carry the instance's
/// cell-relative position, standing in for the geometric content a point
/// backbone would extract; without it the fine stage would have nothing to
/// regress position from.
pub fn generate_synthetic_dataset(cfg: &GenConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tables = draw_tables(&mut rng, cfg);
    let jitter_std = cfg.feature_jitter / (cfg.feature_dim as f64).sqrt();

    let mut submaps = Vec::with_capacity(cfg.num_submaps);
    for g in 0..cfg.num_submaps {
        let col = g % cfg.grid_cols;
        let row = g / cfg.grid_cols;
        let origin = [col as f64 * cfg.cell_side, row as f64 * cfg.cell_side];
        let n = rng.gen_range(cfg.min_instances..=cfg.max_instances);
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let class_id = if cfg.disjoint_classes {
                let lo = g * cfg.num_classes / cfg.num_submaps;
                let hi = (g + 1) * cfg.num_classes / cfg.num_submaps;
                rng.gen_range(lo..hi) as u32
            } else {
                rng.gen_range(0..cfg.num_classes) as u32
            };
            let centroid = [
                origin[0] + rng.gen::<f64>() * cfg.cell_side,
                origin[1] + rng.gen::<f64>() * cfg.cell_side,
                rng.gen::<f64>() * 3.0,
            ];
            let mut feature: Vec<f64> = (0..cfg.feature_dim)
                .map(|d| {
                    tables.class_features.get(class_id as usize, d)
                        + jitter_std * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            // Cell-relative position blended into the last two slots at
            // quarter scale: large enough for the fine regressor to read
            // through attention, small enough to leave class-identity
            // matching (the retrieval signal) essentially untouched.
            let d = cfg.feature_dim;
            feature[d - 2] += 0.25 * ((centroid[0] - origin[0]) / cfg.cell_side - 0.5);
            feature[d - 1] += 0.25 * ((centroid[1] - origin[1]) / cfg.cell_side - 0.5);
            instances.push(Instance { class_id, centroid, feature });
        }
        submaps.push(Submap { id: g as u64, origin, side: cfg.cell_side, instances });
    }

    let total_queries = cfg.num_train + cfg.num_val;
    let mut queries = Vec::with_capacity(total_queries);
    for qid in 0..total_queries {
        let g = rng.gen_range(0..cfg.num_submaps);
        let submap = &submaps[g];
        let avail = submap.instances.len();
        let want = rng.gen_range(cfg.min_hints..=cfg.max_hints).min(avail);
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, avail, want).into_vec();
        chosen.sort_unstable();

        let mut hints = Vec::with_capacity(chosen.len());
        let mut centroid_sum = [0.0f64; 2];
        for &k in &chosen {
            let inst = &submap.instances[k];
            let sector = submap
                .instances
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .min_by(|(_, a), (_, b)| {
                    let da = sq_dist_xy(inst.centroid, a.centroid);
                    let db = sq_dist_xy(inst.centroid, b.centroid);
                    da.total_cmp(&db)
                })
                .map_or(0, |(_, nb)| direction_sector(inst.centroid, nb.centroid));
            let class_part = cfg.text_dim - DIRECTION_SECTORS;
            let mut hint = Vec::with_capacity(cfg.text_dim);
            for d in 0..class_part {
                hint.push(tables.class_text.get(inst.class_id as usize, d));
            }
            for d in 0..DIRECTION_SECTORS {
                hint.push(tables.direction_text.get(sector, d));
            }
            for v in hint.iter_mut() {
                *v += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            hints.push(hint);
            centroid_sum[0] += inst.centroid[0];
            centroid_sum[1] += inst.centroid[1];
        }
        let m = chosen.len() as f64;
        queries.push(Query {
            id: qid as u64,
            hints,
            gt_submap: g as u64,
            gt_pos: [centroid_sum[0] / m, centroid_sum[1] / m],
        });
    }

    let val = queries.split_off(cfg.num_train);
    let ds = Dataset {
        seed: cfg.seed,
        dims: DatasetDims {
            feature_dim: cfg.feature_dim,
            text_dim: cfg.text_dim,
            num_classes: cfg.num_classes,
            num_train: cfg.num_train,
            num_val: cfg.num_val,
        },
        submaps,
        train: queries,
        val,
    };
    debug_assert!(ds.validate().is_ok());
    Ok(ds)
}

fn sq_dist_xy(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenConfig {
        GenConfig {
            seed: 7,
            num_submaps: 6,
            grid_cols: 3,
            cell_side: 20.0,
            num_classes: 12,
            feature_dim: 8,
            text_dim: 12,
            min_instances: 3,
            max_instances: 6,
            min_hints: 2,
            max_hints: 4,
            num_train: 10,
            num_val: 5,
            noise_sigma: 0.05,
            feature_jitter: 0.1,
            disjoint_classes: false,
        }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let cfg = small_config();
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_positions_lie_inside_their_cells() {
        let ds = generate_synthetic_dataset(&small_config()).unwrap();
        for q in ds.train.iter().chain(ds.val.iter()) {
            let s = ds.submap_by_id(q.gt_submap).unwrap();
            assert!(s.contains_xy(q.gt_pos), "query {} escapes its cell", q.id);
        }
    }

    #[test]
    fn save_load_round_trips_exactly() {
        let ds = generate_synthetic_dataset(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.jsonl");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(ds, back);
        // Re-serialization is byte-identical: floats round-trip exactly.
        let second = dir.path().join("toy2.jsonl");
        back.save(&second).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&second).unwrap());
    }

    #[test]
    fn noiseless_disjoint_world_is_solved_by_class_matching() {
        // With exact class text parts and per-submap class vocabularies, a
        // nearest-prototype vote must retrieve the true submap every time.
        let cfg = GenConfig {
            seed: 99,
            num_submaps: 4,
            grid_cols: 2,
            num_classes: 16,
            noise_sigma: 0.0,
            num_train: 0,
            num_val: 40,
            disjoint_classes: true,
            ..small_config()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let tables = synthesis_tables(&cfg).unwrap();
        let class_part = cfg.text_dim - DIRECTION_SECTORS;
        let mut hits = 0usize;
        for q in &ds.val {
            let mut scores = vec![0usize; ds.submaps.len()];
            for hint in &q.hints {
                let mut best_class = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..cfg.num_classes {
                    let d: f64 = (0..class_part)
                        .map(|k| (hint[k] - tables.class_text.get(c, k)).powi(2))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best_class = c;
                    }
                }
                for (gi, s) in ds.submaps.iter().enumerate() {
                    if s.instances.iter().any(|i| i.class_id as usize == best_class) {
                        scores[gi] += 1;
                    }
                }
            }
            let best = scores
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
                .map(|(i, _)| i)
                .unwrap();
            if best as u64 == q.gt_submap {
                hits += 1;
            }
        }
        assert_eq!(hits, ds.val.len(), "class-vote baseline must be perfect");
    }

    #[test]
    fn iou_of_identical_disjoint_and_half_overlapping_cells() {
        let cell = |ox: f64, oy: f64, side: f64| Submap {
            id: 0,
            origin: [ox, oy],
            side,
            instances: vec![],
        };
        let a = cell(0.0, 0.0, 1.0);
        assert_eq!(iou_overlap(&a, &a), 1.0);
        let far = cell(5.0, 5.0, 1.0);
        assert_eq!(iou_overlap(&a, &far), 0.0);
        // Shift by half a side: intersection 0.5, union 1.5.
        let half = cell(0.5, 0.0, 1.0);
        assert!((iou_overlap(&a, &half) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small_config();
        c.min_instances = 5;
        c.max_instances = 3;
        assert!(matches!(
            generate_synthetic_dataset(&c),
            Err(DataError::InvalidConfig(_))
        ));
        let mut c = small_config();
        c.text_dim = DIRECTION_SECTORS;
        assert!(generate_synthetic_dataset(&c).is_err());
        let mut c = small_config();
        c.disjoint_classes = true;
        c.num_classes = c.num_submaps - 1;
        assert!(generate_synthetic_dataset(&c).is_err());
    }

    #[test]
    fn load_rejects_structural_corruption() {
        let ds = generate_synthetic_dataset(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        ds.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        // Drop the header line.
        let headless: String =
            text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let p = dir.path().join("headless.jsonl");
        std::fs::write(&p, headless).unwrap();
        assert!(matches!(Dataset::load(&p), Err(DataError::MissingHeader)));

        // Point a query at a submap that does not exist.
        let dangling = text.replace("\"gt_submap\":0", "\"gt_submap\":999");
        let p = dir.path().join("dangling.jsonl");
        std::fs::write(&p, dangling).unwrap();
        assert!(matches!(Dataset::load(&p), Err(DataError::Validation(_))));

        // Remove one query line so the header count is wrong.
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        let truncated: String = lines.iter().map(|l| format!("{l}\n")).collect();
        let p = dir.path().join("short.jsonl");
        std::fs::write(&p, truncated).unwrap();
        assert!(matches!(Dataset::load(&p), Err(DataError::Validation(_))));
    }

    #[test]
    fn canonical_orders_are_stable_total_orders() {
        let ds = generate_synthetic_dataset(&small_config()).unwrap();
        let s = &ds.submaps[0];
        let order = canonical_instance_order(s);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..s.instances.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            let a = &s.instances[w[0]].centroid;
            let b = &s.instances[w[1]].centroid;
            assert!(a[0] <= b[0] || (a[0] == b[0] && a[1] <= b[1]));
        }
        let q = &ds.train[0];
        let horder = canonical_hint_order(q);
        for w in horder.windows(2) {
            assert!(q.hints[w[0]] <= q.hints[w[1]]);
        }
    }

    #[test]
    fn direction_sector_hand_values() {
        let o = [0.0, 0.0, 0.0];
        // Due east: angle 0, mid-range sector.
        assert_eq!(direction_sector(o, [1.0, 0.0, 0.0]), 4);
        // Due west: angle pi wraps back to sector 0 (same as -pi).
        assert_eq!(direction_sector(o, [-1.0, 1e-12, 0.0]), 7);
        assert_eq!(direction_sector(o, [-1.0, -1e-12, 0.0]), 0);
        for probe in [[0.3, 0.9, 0.0], [-2.0, 0.1, 0.0], [0.0, -1.0, 0.0]] {
            assert!(direction_sector(o, probe) < DIRECTION_SECTORS);
        }
    }
}
