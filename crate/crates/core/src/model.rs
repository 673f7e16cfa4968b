//! The learnable model: named parameter registry, checkpoint serialization,
//! the three coarse descriptor branches, and the fine position regressor.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{canonical_hint_order, canonical_instance_order, iou_overlap, Query, Submap};
use crate::gradcheck::{ParamIds, ParamMap};
use crate::hyperbolic::{rie_forward, AttentionWeights, BallParams, GeometryMode};
use crate::losses::{
    bidirectional_similarity, global_similarity, negative_repulsion_loss,
    negatives_mask_from_ids, scale_raw_for, set_to_set_lambda, OverlapWeight,
};
use crate::relation::{
    build_offset_tensor, build_text_offsets, isre_forward, FuseWeights, IntegratorVariant,
    MlpWeights, RelationWeights,
};
use crate::spectral::{
    build_similarity_graph, chebyshev_filter_bank, encode_point_global, pool_language_global,
    scaled_laplacian, triple_cross_attention, EncoderWeights, GruWeights, SequenceWeights,
};
use crate::tape::{Tape, TapeError, TapeResult, ValueId};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"NTNSR001";

/// Raw value mapped through softplus to approximately 1.
const RAW_FOR_UNIT_SOFTPLUS: f64 = 0.5413248546129181;

/// Inverse of softplus: softplus(softplus_inverse(y)) == y for y > 0.
fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint contains unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {0} contains non-finite values")]
    NonFinite(String),
}

/// Architecture hyperparameters shared by every forward pass.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Instance feature width from the perception side.
    pub feature_dim: usize,
    /// Hint vector width from the language side.
    pub text_dim: usize,
    /// Common descriptor width; must be a multiple of 4 (phase split plus
    /// quarter-width hidden layers).
    pub embed_dim: usize,
    /// Chebyshev polynomial order of the spectral filter bank.
    pub cheb_order: usize,
    pub geometry: GeometryMode,
    pub integrator: IntegratorVariant,
    /// Residual blend weight of the relation encoder.
    pub alpha_res: f64,
    /// Similarity temperature of all contrastive losses.
    pub gamma: f64,
    /// Initial effective step size of the phase update (pre-softplus raw is
    /// derived from this at init time; the step stays learnable afterwards).
    pub dt_init: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0 || self.text_dim == 0 {
            return Err(ModelError::Config("feature_dim and text_dim must be >= 1".into()));
        }
        if self.embed_dim < 4 || self.embed_dim % 4 != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim must be a positive multiple of 4, got {}",
                self.embed_dim
            )));
        }
        if self.cheb_order == 0 {
            return Err(ModelError::Config("cheb_order must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(ModelError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !self.alpha_res.is_finite() {
            return Err(ModelError::Config("alpha_res must be finite".into()));
        }
        if !(self.dt_init > 0.0 && self.dt_init.is_finite()) {
            return Err(ModelError::Config(format!(
                "dt_init must be positive, got {}",
                self.dt_init
            )));
        }
        Ok(())
    }
}

enum Init {
    Randn(f64),
    Zeros,
    Const(f64),
}

struct ParamSpec {
    name: &'static str,
    rows: usize,
    cols: usize,
    init: Init,
}

/// Single source of truth for parameter names, shapes, and initialization.
/// Listed in a fixed order so seeded initialization is reproducible.
fn parameter_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let f = cfg.feature_dim;
    let t = cfg.text_dim;
    let d = cfg.embed_dim;
    let h = d / 4;
    let d2 = 2 * d;
    let rs = |n| 1.0 / (n as f64).sqrt();
    let w = |name, rows, cols| ParamSpec { name, rows, cols, init: Init::Randn(rs(rows)) };
    let b = |name, cols| ParamSpec { name, rows: 1, cols, init: Init::Zeros };
    let s = |name, v| ParamSpec { name, rows: 1, cols: 1, init: Init::Const(v) };

    let mut specs = vec![
        // Instance branch: hyperbolic self-attention over embedded features.
        s("inst.c_raw", RAW_FOR_UNIT_SOFTPLUS),
        s("inst.zeta", 0.5),
        s("inst.gate", 0.0),
        w("inst.pt_w", f, d),
        b("inst.pt_b", d),
        w("inst.wq", d, d),
        w("inst.wk", d, d),
        w("inst.wv", d, d),
        w("inst.tx_w1", t, d),
        b("inst.tx_b1", d),
        w("inst.tx_w2", d, d),
        b("inst.tx_b2", d),
        s("inst.a_raw", scale_raw_for(1.0)),
        s("inst.j_raw", 0.0),
        // Relation branch, point side.
        w("rel.pt_w", f, d),
        b("rel.pt_b", d),
        w("rel.pt_geo_w1", 3, h),
        b("rel.pt_geo_b1", h),
        w("rel.pt_geo_w2", h, d),
        b("rel.pt_geo_b2", d),
        w("rel.pt_fuse_w1", 3 * d, d),
        b("rel.pt_fuse_b1", d),
        w("rel.pt_fuse_w2", d, d),
        b("rel.pt_fuse_b2", d),
        w("rel.pt_eta", d, d),
        w("rel.pt_force", d / 2, d / 2),
        s("rel.pt_dt", softplus_inverse(cfg.dt_init)),
        // Relation branch, text side (same encoder over hint-pair offsets).
        w("rel.tx_w", t, d),
        b("rel.tx_b", d),
        w("rel.tx_geo_w1", 2 * t, h),
        b("rel.tx_geo_b1", h),
        w("rel.tx_geo_w2", h, d),
        b("rel.tx_geo_b2", d),
        w("rel.tx_fuse_w1", 3 * d, d),
        b("rel.tx_fuse_b1", d),
        w("rel.tx_fuse_w2", d, d),
        b("rel.tx_fuse_b2", d),
        w("rel.tx_eta", d, d),
        w("rel.tx_force", d / 2, d / 2),
        s("rel.tx_dt", softplus_inverse(cfg.dt_init)),
        s("rel.a_raw", scale_raw_for(1.0)),
        s("rel.j_raw", 0.0),
        // Global branch: spectral filters plus sequence encoder.
        w("glob.pt_w", f, d),
        b("glob.pt_b", d),
        s("glob.tau_raw", RAW_FOR_UNIT_SOFTPLUS),
        ParamSpec { name: "glob.beta", rows: 3, cols: cfg.cheb_order, init: Init::Zeros },
    ];
    for dir in ["fw", "bw"] {
        for gate in ["z", "r", "h"] {
            specs.push(ParamSpec {
                name: gru_name(dir, "x", gate),
                rows: d,
                cols: d,
                init: Init::Randn(rs(d)),
            });
            specs.push(ParamSpec {
                name: gru_name(dir, "h", gate),
                rows: d,
                cols: d,
                init: Init::Randn(rs(d)),
            });
            specs.push(ParamSpec {
                name: gru_name(dir, "b", gate),
                rows: 1,
                cols: d,
                init: Init::Zeros,
            });
        }
    }
    specs.extend([
        w("glob.enc_wq", d2, d2),
        w("glob.enc_wk", d2, d2),
        w("glob.enc_wv", d2, d2),
        w("glob.enc_wo", d2, d2),
        w("glob.enc_ffn_w1", d2, d2),
        b("glob.enc_ffn_b1", d2),
        w("glob.enc_ffn_w2", d2, d2),
        b("glob.enc_ffn_b2", d2),
        w("glob.tx_w1", t, d),
        b("glob.tx_b1", d),
        w("glob.tx_w2", d, d),
        b("glob.tx_b2", d),
        w("glob.pool_wp", d, d),
        w("glob.pool_w", 1, d),
        s("glob.a_raw", scale_raw_for(1.0)),
        // Fine stage: hints attend to instances, offset regressed from pool.
        w("fine.tx_w", t, d),
        b("fine.tx_b", d),
        w("fine.pt_w", f, d),
        b("fine.pt_b", d),
        w("fine.wq", d, d),
        w("fine.wk", d, d),
        w("fine.wv", d, d),
        w("fine.reg_w1", d, d),
        b("fine.reg_b1", d),
        w("fine.reg_w2", d, 2),
        b("fine.reg_b2", 2),
    ]);
    specs
}

fn gru_name(dir: &str, kind: &str, gate: &str) -> &'static str {
    // The registry needs 'static names; enumerate the 18 combinations.
    match (dir, kind, gate) {
        ("fw", "x", "z") => "glob.fw_xz",
        ("fw", "h", "z") => "glob.fw_hz",
        ("fw", "b", "z") => "glob.fw_bz",
        ("fw", "x", "r") => "glob.fw_xr",
        ("fw", "h", "r") => "glob.fw_hr",
        ("fw", "b", "r") => "glob.fw_br",
        ("fw", "x", "h") => "glob.fw_xh",
        ("fw", "h", "h") => "glob.fw_hh",
        ("fw", "b", "h") => "glob.fw_bh",
        ("bw", "x", "z") => "glob.bw_xz",
        ("bw", "h", "z") => "glob.bw_hz",
        ("bw", "b", "z") => "glob.bw_bz",
        ("bw", "x", "r") => "glob.bw_xr",
        ("bw", "h", "r") => "glob.bw_hr",
        ("bw", "b", "r") => "glob.bw_br",
        ("bw", "x", "h") => "glob.bw_xh",
        ("bw", "h", "h") => "glob.bw_hh",
        ("bw", "b", "h") => "glob.bw_bh",
        _ => unreachable!("unknown gru weight {dir}_{kind}{gate}"),
    }
}

/// All learnable tensors, keyed by stable names.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub values: ParamMap,
}

impl ModelParams {
    /// Seeded initialization: weights are fan-in-scaled Gaussians, biases and
    /// filter coefficients zero, scalars pinned to their documented starts.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = ParamMap::new();
        for spec in parameter_specs(&config) {
            let tensor = match spec.init {
                Init::Randn(std) => Tensor::randn(&mut rng, spec.rows, spec.cols, std),
                Init::Zeros => Tensor::zeros(spec.rows, spec.cols),
                Init::Const(v) => Tensor::from_vec(spec.rows, spec.cols, vec![v]),
            };
            let prev = values.insert(spec.name.to_string(), tensor);
            assert!(prev.is_none(), "duplicate parameter name {}", spec.name);
        }
        Ok(ModelParams { config, values })
    }

    /// Register every parameter as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape) -> ParamIds {
        self.values
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor)))
            .collect()
    }

    /// Register every parameter as a constant (inference; no gradient state).
    pub fn constants(&self, tape: &mut Tape) -> ParamIds {
        self.values
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.constant(tensor)))
            .collect()
    }

    /// Write the self-describing binary checkpoint: magic, entry count, then
    /// sorted (name, shape, f64 little-endian payload) entries. Identical
    /// parameters always produce identical bytes.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for (name, tensor) in &self.values {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.rows() as u64).to_le_bytes())?;
            w.write_all(&(tensor.cols() as u64).to_le_bytes())?;
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a checkpoint and validate it against `config`: exact name set,
    /// exact shapes, finite values.
    pub fn load(path: &Path, config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let expected: BTreeMap<&'static str, (usize, usize)> = parameter_specs(&config)
            .iter()
            .map(|s| (s.name, (s.rows, s.cols)))
            .collect();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| ModelError::Corrupt("file shorter than magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let count = read_u64(&mut r)? as usize;
        let mut values = ParamMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(ModelError::Corrupt(format!("name length {name_len}")));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| ModelError::Corrupt("truncated name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| ModelError::Corrupt("non-utf8 name".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let Some(&want) = expected.get(name.as_str()) else {
                return Err(ModelError::UnknownParam(name));
            };
            if (rows, cols) != want {
                return Err(ModelError::ParamShape {
                    name,
                    expected: want,
                    got: (rows, cols),
                });
            }
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)
                    .map_err(|_| ModelError::Corrupt("truncated payload".into()))?;
                data.push(f64::from_le_bytes(buf));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
            if values.insert(name.clone(), Tensor::from_vec(rows, cols, data)).is_some() {
                return Err(ModelError::Corrupt(format!("duplicate entry {name}")));
            }
        }
        for name in expected.keys() {
            if !values.contains_key(*name) {
                return Err(ModelError::MissingParam(name.to_string()));
            }
        }
        Ok(ModelParams { config, values })
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| ModelError::Corrupt("truncated integer".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| ModelError::Corrupt("truncated integer".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn fetch(ids: &ParamIds, name: &str) -> ValueId {
    *ids.get(name).unwrap_or_else(|| panic!("parameter {name} not registered"))
}

/// Instance features and centroids rearranged into the canonical order used
/// by sequence-sensitive consumers.
pub fn sorted_point_inputs(submap: &Submap) -> (Tensor, Vec<[f64; 3]>) {
    let order = canonical_instance_order(submap);
    let d = submap.instances.first().map_or(0, |i| i.feature.len());
    let mut data = Vec::with_capacity(order.len() * d);
    let mut centroids = Vec::with_capacity(order.len());
    for &i in &order {
        data.extend_from_slice(&submap.instances[i].feature);
        centroids.push(submap.instances[i].centroid);
    }
    (Tensor::from_vec(order.len(), d, data), centroids)
}

/// Hint vectors rearranged into canonical (lexicographic) order.
pub fn sorted_hint_matrix(query: &Query) -> Tensor {
    let order = canonical_hint_order(query);
    let d = query.hints.first().map_or(0, |h| h.len());
    let mut data = Vec::with_capacity(order.len() * d);
    for &i in &order {
        data.extend_from_slice(&query.hints[i]);
    }
    Tensor::from_vec(order.len(), d, data)
}

fn linear(tape: &mut Tape, x: ValueId, w: ValueId, b: ValueId) -> TapeResult<ValueId> {
    let xw = tape.matmul(x, w)?;
    tape.add_row_broadcast(xw, b)
}

fn two_layer_tanh(
    tape: &mut Tape,
    x: ValueId,
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
) -> TapeResult<ValueId> {
    let h = linear(tape, x, w1, b1)?;
    let h = tape.tanh(h)?;
    linear(tape, h, w2, b2)
}

/// Instance-branch descriptors for a submap's feature rows.
pub fn instance_point_descriptors(
    tape: &mut Tape,
    ids: &ParamIds,
    features: &Tensor,
    geometry: GeometryMode,
) -> TapeResult<ValueId> {
    let x = tape.constant(features);
    let embedded = linear(tape, x, fetch(ids, "inst.pt_w"), fetch(ids, "inst.pt_b"))?;
    let weights = AttentionWeights {
        w_q: fetch(ids, "inst.wq"),
        w_k: fetch(ids, "inst.wk"),
        w_v: fetch(ids, "inst.wv"),
    };
    let ball = BallParams {
        c_raw: fetch(ids, "inst.c_raw"),
        zeta: fetch(ids, "inst.zeta"),
        beta_gate: fetch(ids, "inst.gate"),
    };
    rie_forward(tape, embedded, &weights, &ball, geometry)
}

/// Instance-branch descriptors for a query's hint rows.
pub fn instance_text_descriptors(
    tape: &mut Tape,
    ids: &ParamIds,
    hints: &Tensor,
) -> TapeResult<ValueId> {
    let h = tape.constant(hints);
    two_layer_tanh(
        tape,
        h,
        fetch(ids, "inst.tx_w1"),
        fetch(ids, "inst.tx_b1"),
        fetch(ids, "inst.tx_w2"),
        fetch(ids, "inst.tx_b2"),
    )
}

fn relation_weights(ids: &ParamIds, prefix: &str) -> RelationWeights {
    let n = |suffix: &str| format!("rel.{prefix}_{suffix}");
    RelationWeights {
        fuse: FuseWeights {
            geo: MlpWeights {
                w1: fetch(ids, &n("geo_w1")),
                b1: fetch(ids, &n("geo_b1")),
                w2: fetch(ids, &n("geo_w2")),
                b2: fetch(ids, &n("geo_b2")),
            },
            fuse: MlpWeights {
                w1: fetch(ids, &n("fuse_w1")),
                b1: fetch(ids, &n("fuse_b1")),
                w2: fetch(ids, &n("fuse_w2")),
                b2: fetch(ids, &n("fuse_b2")),
            },
        },
        w_eta: fetch(ids, &n("eta")),
        w_v: fetch(ids, &n("force")),
        dt_raw: fetch(ids, &n("dt")),
    }
}

/// Relation-branch descriptors for a submap: centroid-offset edges through
/// the symplectic encoder, aggregated back to nodes.
pub fn relation_point_descriptors(
    tape: &mut Tape,
    ids: &ParamIds,
    features: &Tensor,
    centroids: &[[f64; 3]],
    integrator: IntegratorVariant,
    alpha_res: f64,
) -> TapeResult<ValueId> {
    let x = tape.constant(features);
    let embedded = linear(tape, x, fetch(ids, "rel.pt_w"), fetch(ids, "rel.pt_b"))?;
    let offsets = tape.constant(&build_offset_tensor(centroids));
    let weights = relation_weights(ids, "pt");
    isre_forward(tape, embedded, offsets, &weights, integrator, alpha_res)
}

/// Relation-branch descriptors for a query: hint-pair concatenation edges
/// through the same encoder stack.
pub fn relation_text_descriptors(
    tape: &mut Tape,
    ids: &ParamIds,
    hints: &Tensor,
    integrator: IntegratorVariant,
    alpha_res: f64,
) -> TapeResult<ValueId> {
    let h = tape.constant(hints);
    let embedded = linear(tape, h, fetch(ids, "rel.tx_w"), fetch(ids, "rel.tx_b"))?;
    let offsets = tape.constant(&build_text_offsets(hints));
    let weights = relation_weights(ids, "tx");
    isre_forward(tape, embedded, offsets, &weights, integrator, alpha_res)
}

fn gru_ids(ids: &ParamIds, dir: &str) -> GruWeights {
    let n = |suffix: &str| format!("glob.{dir}_{suffix}");
    GruWeights {
        w_xz: fetch(ids, &n("xz")),
        w_hz: fetch(ids, &n("hz")),
        b_z: fetch(ids, &n("bz")),
        w_xr: fetch(ids, &n("xr")),
        w_hr: fetch(ids, &n("hr")),
        b_r: fetch(ids, &n("br")),
        w_xh: fetch(ids, &n("xh")),
        w_hh: fetch(ids, &n("hh")),
        b_h: fetch(ids, &n("bh")),
    }
}

/// Global point descriptor: canonical sort, spectral filter bank, triple
/// cross-attention, then the bidirectional sequence head. Returns 1 x D.
pub fn global_point_descriptor(
    tape: &mut Tape,
    ids: &ParamIds,
    submap: &Submap,
) -> TapeResult<ValueId> {
    let (features, _) = sorted_point_inputs(submap);
    let x = tape.constant(&features);
    let embedded = linear(tape, x, fetch(ids, "glob.pt_w"), fetch(ids, "glob.pt_b"))?;
    let tau = {
        let sp = tape.softplus(fetch(ids, "glob.tau_raw"))?;
        tape.add_scalar(sp, 1e-6)?
    };
    let graph = build_similarity_graph(tape, embedded, tau)?;
    let lap = scaled_laplacian(tape, &graph)?;
    let banks = chebyshev_filter_bank(tape, lap, embedded, fetch(ids, "glob.beta"))?;
    let kappa = triple_cross_attention(tape, banks[0], banks[1], banks[2])?;
    let weights = SequenceWeights {
        forward: gru_ids(ids, "fw"),
        backward: gru_ids(ids, "bw"),
        encoder: EncoderWeights {
            w_q: fetch(ids, "glob.enc_wq"),
            w_k: fetch(ids, "glob.enc_wk"),
            w_v: fetch(ids, "glob.enc_wv"),
            w_o: fetch(ids, "glob.enc_wo"),
            ffn_w1: fetch(ids, "glob.enc_ffn_w1"),
            ffn_b1: fetch(ids, "glob.enc_ffn_b1"),
            ffn_w2: fetch(ids, "glob.enc_ffn_w2"),
            ffn_b2: fetch(ids, "glob.enc_ffn_b2"),
        },
    };
    encode_point_global(tape, kappa, &weights)
}

/// Global text descriptor: canonically ordered hints through the text tower,
/// then attention pooling. Returns 1 x D.
pub fn global_text_descriptor(
    tape: &mut Tape,
    ids: &ParamIds,
    query: &Query,
) -> TapeResult<ValueId> {
    let hints = sorted_hint_matrix(query);
    let h = tape.constant(&hints);
    let transformed = two_layer_tanh(
        tape,
        h,
        fetch(ids, "glob.tx_w1"),
        fetch(ids, "glob.tx_b1"),
        fetch(ids, "glob.tx_w2"),
        fetch(ids, "glob.tx_b2"),
    )?;
    pool_language_global(tape, transformed, fetch(ids, "glob.pool_wp"), fetch(ids, "glob.pool_w"))
}

/// One coarse training pair: a query and its ground-truth submap.
pub struct CoarsePair<'a> {
    pub submap: &'a Submap,
    pub query: &'a Query,
}

/// The three branch losses of one batch, as tape nodes.
pub struct CoarseLosses {
    pub instance: ValueId,
    pub relation: ValueId,
    pub global: ValueId,
}

impl CoarseLosses {
    pub fn total(&self, tape: &mut Tape) -> TapeResult<ValueId> {
        let a = tape.add(self.instance, self.relation)?;
        tape.add(a, self.global)
    }
}

fn stack_scalar_grid(tape: &mut Tape, grid: Vec<Vec<ValueId>>) -> TapeResult<ValueId> {
    let mut rows = Vec::with_capacity(grid.len());
    for row in grid {
        rows.push(tape.concat_cols(&row)?);
    }
    tape.concat_rows(&rows)
}

fn batch_mask(pairs: &[CoarsePair]) -> Tensor {
    negatives_mask_from_ids(&pairs.iter().map(|p| p.submap.id).collect::<Vec<_>>())
}

/// B x B symmetric set similarity of per-pair descriptor sets.
fn set_similarity_grid(
    tape: &mut Tape,
    xs: &[ValueId],
    ts: &[ValueId],
    gamma: f64,
) -> TapeResult<ValueId> {
    let b = xs.len();
    let mut l_xt = Vec::with_capacity(b);
    let mut l_tx = Vec::with_capacity(b);
    for i in 0..b {
        let mut xt_row = Vec::with_capacity(b);
        let mut tx_row = Vec::with_capacity(b);
        for j in 0..b {
            xt_row.push(set_to_set_lambda(tape, xs[i], ts[j])?);
            tx_row.push(set_to_set_lambda(tape, ts[i], xs[j])?);
        }
        l_xt.push(xt_row);
        l_tx.push(tx_row);
    }
    let l_xt = stack_scalar_grid(tape, l_xt)?;
    let l_tx = stack_scalar_grid(tape, l_tx)?;
    bidirectional_similarity(tape, l_xt, l_tx, gamma)
}

/// Instance-branch batch loss: per-instance descriptors matched set-to-set,
/// with a learnable overlap softener on the negatives.
pub fn instance_batch_loss(
    tape: &mut Tape,
    ids: &ParamIds,
    pairs: &[CoarsePair],
    cfg: &ModelConfig,
) -> TapeResult<ValueId> {
    if pairs.is_empty() {
        return Err(TapeError::EmptyInput { op: "instance_batch_loss" });
    }
    let mut xs = Vec::with_capacity(pairs.len());
    let mut ts = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let features = pair.submap.feature_matrix();
        let hints = pair.query.hint_matrix();
        xs.push(instance_point_descriptors(tape, ids, &features, cfg.geometry)?);
        ts.push(instance_text_descriptors(tape, ids, &hints)?);
    }
    let s = set_similarity_grid(tape, &xs, &ts, cfg.gamma)?;
    negative_repulsion_loss(
        tape,
        s,
        &batch_mask(pairs),
        OverlapWeight::Learnable { j_raw: fetch(ids, "inst.j_raw") },
        fetch(ids, "inst.a_raw"),
    )
}

/// Relation-branch batch loss over the phase-enhanced edge descriptors.
pub fn relation_batch_loss(
    tape: &mut Tape,
    ids: &ParamIds,
    pairs: &[CoarsePair],
    cfg: &ModelConfig,
) -> TapeResult<ValueId> {
    if pairs.is_empty() {
        return Err(TapeError::EmptyInput { op: "relation_batch_loss" });
    }
    let mut xs = Vec::with_capacity(pairs.len());
    let mut ts = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let features = pair.submap.feature_matrix();
        let centroids = pair.submap.centroids();
        let hints = pair.query.hint_matrix();
        xs.push(relation_point_descriptors(
            tape,
            ids,
            &features,
            &centroids,
            cfg.integrator,
            cfg.alpha_res,
        )?);
        ts.push(relation_text_descriptors(
            tape,
            ids,
            &hints,
            cfg.integrator,
            cfg.alpha_res,
        )?);
    }
    let s = set_similarity_grid(tape, &xs, &ts, cfg.gamma)?;
    negative_repulsion_loss(
        tape,
        s,
        &batch_mask(pairs),
        OverlapWeight::Learnable { j_raw: fetch(ids, "rel.j_raw") },
        fetch(ids, "rel.a_raw"),
    )
}

/// Global-branch batch loss: whole-submap descriptors against pooled hint
/// descriptors, with footprint IoU softening the negatives per pair.
pub fn global_batch_loss(
    tape: &mut Tape,
    ids: &ParamIds,
    pairs: &[CoarsePair],
    cfg: &ModelConfig,
) -> TapeResult<ValueId> {
    if pairs.is_empty() {
        return Err(TapeError::EmptyInput { op: "global_batch_loss" });
    }
    let b = pairs.len();
    let mut glob_p = Vec::with_capacity(b);
    let mut glob_q = Vec::with_capacity(b);
    for pair in pairs {
        glob_p.push(global_point_descriptor(tape, ids, pair.submap)?);
        glob_q.push(global_text_descriptor(tape, ids, pair.query)?);
    }
    let p = tape.concat_rows(&glob_p)?;
    let q = tape.concat_rows(&glob_q)?;
    let s = global_similarity(tape, p, q, cfg.gamma)?;
    let mut iou = Tensor::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            iou.set(i, j, iou_overlap(pairs[i].submap, pairs[j].submap));
        }
    }
    negative_repulsion_loss(
        tape,
        s,
        &batch_mask(pairs),
        OverlapWeight::PerPair { overlap: &iou },
        fetch(ids, "glob.a_raw"),
    )
}

/// Batch losses of all three branches. Pairs must reference distinct submaps
/// (diagonal positives); the repulsion masks are derived from submap ids so
/// accidental duplicates degrade to ignored pairs rather than wrong labels.
pub fn coarse_losses(
    tape: &mut Tape,
    ids: &ParamIds,
    pairs: &[CoarsePair],
    cfg: &ModelConfig,
) -> TapeResult<CoarseLosses> {
    if pairs.is_empty() {
        return Err(TapeError::EmptyInput { op: "coarse_losses" });
    }
    Ok(CoarseLosses {
        instance: instance_batch_loss(tape, ids, pairs, cfg)?,
        relation: relation_batch_loss(tape, ids, pairs, cfg)?,
        global: global_batch_loss(tape, ids, pairs, cfg)?,
    })
}

/// Fine-stage position estimate: hints attend to instances once, the pooled
/// context regresses an offset from the cell-center anchor. Returns 1 x 2.
pub fn fine_predict(
    tape: &mut Tape,
    ids: &ParamIds,
    submap: &Submap,
    query: &Query,
) -> TapeResult<ValueId> {
    let hints = query.hint_matrix();
    let features = submap.feature_matrix();
    let h = tape.constant(&hints);
    let x = tape.constant(&features);
    let h_emb = linear(tape, h, fetch(ids, "fine.tx_w"), fetch(ids, "fine.tx_b"))?;
    let x_emb = linear(tape, x, fetch(ids, "fine.pt_w"), fetch(ids, "fine.pt_b"))?;
    let (_, d) = tape.shape(h_emb);
    let qm = tape.matmul(h_emb, fetch(ids, "fine.wq"))?;
    let km = tape.matmul(x_emb, fetch(ids, "fine.wk"))?;
    let vm = tape.matmul(x_emb, fetch(ids, "fine.wv"))?;
    let kt = tape.transpose(km)?;
    let logits = {
        let qk = tape.matmul(qm, kt)?;
        tape.mul_scalar(qk, 1.0 / (d as f64).sqrt())?
    };
    let att = tape.softmax_rows(logits)?;
    let ctx = tape.matmul(att, vm)?;
    let pooled = tape.col_means(ctx)?;
    let offset = two_layer_tanh(
        tape,
        pooled,
        fetch(ids, "fine.reg_w1"),
        fetch(ids, "fine.reg_b1"),
        fetch(ids, "fine.reg_w2"),
        fetch(ids, "fine.reg_b2"),
    )?;
    let anchor = submap.anchor();
    let anchor = tape.constant(&Tensor::row(anchor.to_vec()));
    tape.add(anchor, offset)
}

/// Mean squared position error of the fine stage over a batch.
pub fn fine_loss(
    tape: &mut Tape,
    ids: &ParamIds,
    pairs: &[CoarsePair],
) -> TapeResult<ValueId> {
    if pairs.is_empty() {
        return Err(TapeError::EmptyInput { op: "fine_loss" });
    }
    let mut total: Option<ValueId> = None;
    for pair in pairs {
        let pred = fine_predict(tape, ids, pair.submap, pair.query)?;
        let gt = tape.constant(&Tensor::row(pair.query.gt_pos.to_vec()));
        let diff = tape.sub(pred, gt)?;
        let sq = tape.mul(diff, diff)?;
        let err = tape.sum(sq)?;
        total = Some(match total {
            None => err,
            Some(t) => tape.add(t, err)?,
        });
    }
    let t = total.expect("nonempty batch");
    tape.mul_scalar(t, 1.0 / pairs.len() as f64)
}
