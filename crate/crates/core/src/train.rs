//! Optimization: first/second-moment adaptive updates, deterministic batch
//! sampling, and the two-phase (coarse then fine) training driver.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::gradcheck::ParamMap;
use crate::model::{coarse_losses, fine_loss, CoarsePair, ModelParams};
use crate::tape::{Tape, TapeError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("tape failure at step {step} ({phase}): {source}; batch {batch}")]
    Step { step: usize, phase: &'static str, source: TapeError, batch: String },
    #[error("non-finite {phase} loss at step {step}; batch {batch}")]
    NonFiniteLoss { step: usize, phase: &'static str, batch: String },
    #[error("dataset has no training queries")]
    EmptyTrainSet,
    #[error("batch size must be >= 1")]
    BadBatch,
}

/// Adaptive first/second-moment optimizer. Moment state is kept per
/// parameter name and only parameters that received a gradient move.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Apply one update. `lr = 0` leaves every parameter bit-identical.
    pub fn step(&mut self, params: &mut ParamMap, grads: &BTreeMap<String, Vec<f64>>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let tensor = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            assert_eq!(tensor.len(), grad.len(), "gradient width for {name}");
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch: usize,
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub coarse_lr: f64,
    pub fine_lr: f64,
}

/// One recorded point of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossRecord {
    Coarse { step: usize, instance: f64, relation: f64, global: f64 },
    Fine { step: usize, loss: f64 },
}

impl LossRecord {
    pub fn total(&self) -> f64 {
        match *self {
            LossRecord::Coarse { instance, relation, global, .. } => {
                instance + relation + global
            }
            LossRecord::Fine { loss, .. } => loss,
        }
    }
}

/// Deterministic batch source: each draw picks `batch` distinct submaps that
/// own at least one training query, then one of that submap's queries.
/// Diagonal positives are guaranteed because pair i's query belongs to
/// pair i's submap and the submaps are pairwise distinct.
struct BatchSampler<'a> {
    dataset: &'a Dataset,
    // (submap index in dataset.submaps, indices into dataset.train)
    by_submap: Vec<(usize, Vec<usize>)>,
    batch: usize,
}

impl<'a> BatchSampler<'a> {
    fn new(dataset: &'a Dataset, batch: usize) -> Result<Self, TrainError> {
        if batch == 0 {
            return Err(TrainError::BadBatch);
        }
        if dataset.train.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (qi, q) in dataset.train.iter().enumerate() {
            map.entry(q.gt_submap).or_default().push(qi);
        }
        let by_submap = map
            .into_iter()
            .map(|(sid, queries)| {
                let si = dataset
                    .submaps
                    .iter()
                    .position(|s| s.id == sid)
                    .expect("validated dataset has the submap");
                (si, queries)
            })
            .collect();
        Ok(BatchSampler { dataset, by_submap, batch })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<CoarsePair<'a>> {
        let avail = self.by_submap.len();
        let take = self.batch.min(avail);
        let chosen = rand::seq::index::sample(rng, avail, take);
        let mut picks: Vec<(usize, usize)> = chosen
            .iter()
            .map(|slot| {
                let (si, queries) = &self.by_submap[slot];
                let qi = queries[rand::Rng::gen_range(rng, 0..queries.len())];
                (*si, qi)
            })
            .collect();
        // Stable ordering keeps the batch layout independent of sample()
        // internals beyond the chosen set.
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|(si, qi)| CoarsePair {
                submap: &self.dataset.submaps[si],
                query: &self.dataset.train[qi],
            })
            .collect()
    }
}

fn batch_summary(pairs: &[CoarsePair]) -> String {
    let ids: Vec<String> = pairs
        .iter()
        .map(|p| format!("q{}->s{}", p.query.id, p.submap.id))
        .collect();
    ids.join(", ")
}

/// Coarse phase: optimize the three branch losses jointly.
pub fn train_coarse(
    dataset: &Dataset,
    params: &mut ModelParams,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>, TrainError> {
    let sampler = BatchSampler::new(dataset, cfg.batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.coarse_lr);
    let mut curve = Vec::with_capacity(cfg.coarse_steps);
    for step in 0..cfg.coarse_steps {
        let pairs = sampler.draw(&mut rng);
        let mut tape = Tape::new();
        let ids = params.leaves(&mut tape);
        let fail = |source: TapeError| TrainError::Step {
            step,
            phase: "coarse",
            source,
            batch: batch_summary(&pairs),
        };
        let losses = coarse_losses(&mut tape, &ids, &pairs, &params.config).map_err(fail)?;
        let total = losses.total(&mut tape).map_err(fail)?;
        let record = LossRecord::Coarse {
            step,
            instance: tape.item(losses.instance),
            relation: tape.item(losses.relation),
            global: tape.item(losses.global),
        };
        if !record.total().is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                phase: "coarse",
                batch: batch_summary(&pairs),
            });
        }
        tape.backward(total).map_err(fail)?;
        let grads = collect_grads(&tape, &ids);
        adam.step(&mut params.values, &grads);
        curve.push(record);
    }
    Ok(curve)
}

/// Fine phase: optimize the position regressor; coarse parameters receive no
/// gradient and stay untouched.
pub fn train_fine(
    dataset: &Dataset,
    params: &mut ModelParams,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>, TrainError> {
    let sampler = BatchSampler::new(dataset, cfg.batch)?;
    // Offset the seed stream so fine batches differ from coarse ones.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg.fine_lr);
    let mut curve = Vec::with_capacity(cfg.fine_steps);
    for step in 0..cfg.fine_steps {
        let pairs = sampler.draw(&mut rng);
        let mut tape = Tape::new();
        let ids = params.leaves(&mut tape);
        let fail = |source: TapeError| TrainError::Step {
            step,
            phase: "fine",
            source,
            batch: batch_summary(&pairs),
        };
        let loss = fine_loss(&mut tape, &ids, &pairs).map_err(fail)?;
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                phase: "fine",
                batch: batch_summary(&pairs),
            });
        }
        tape.backward(loss).map_err(fail)?;
        let grads = collect_grads(&tape, &ids);
        debug_assert!(grads.keys().all(|k| k.starts_with("fine.")));
        adam.step(&mut params.values, &grads);
        curve.push(LossRecord::Fine { step, loss: value });
    }
    Ok(curve)
}

/// Both phases in sequence; the concatenated loss curve keeps phase tags.
pub fn train(
    dataset: &Dataset,
    params: &mut ModelParams,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>, TrainError> {
    let mut curve = train_coarse(dataset, params, cfg)?;
    curve.extend(train_fine(dataset, params, cfg)?);
    Ok(curve)
}

fn collect_grads(
    tape: &Tape,
    ids: &crate::gradcheck::ParamIds,
) -> BTreeMap<String, Vec<f64>> {
    ids.iter()
        .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g.to_vec())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GenConfig};
    use crate::hyperbolic::GeometryMode;
    use crate::model::ModelConfig;
    use crate::relation::IntegratorVariant;

    fn toy_dataset() -> Dataset {
        generate_synthetic_dataset(&GenConfig {
            seed: 3,
            num_submaps: 6,
            grid_cols: 3,
            cell_side: 20.0,
            num_classes: 12,
            feature_dim: 6,
            text_dim: 11,
            min_instances: 3,
            max_instances: 4,
            min_hints: 2,
            max_hints: 3,
            num_train: 18,
            num_val: 4,
            noise_sigma: 0.05,
            feature_jitter: 0.1,
            disjoint_classes: false,
        })
        .unwrap()
    }

    fn toy_model() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                feature_dim: 6,
                text_dim: 11,
                embed_dim: 8,
                cheb_order: 3,
                geometry: GeometryMode::Gyro,
                integrator: IntegratorVariant::Euler,
                alpha_res: 0.1,
                gamma: 0.07,
                dt_init: 0.1,
            },
            0,
        )
        .unwrap()
    }

    fn train_cfg(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            seed: 9,
            batch: 4,
            coarse_steps: steps,
            fine_steps: steps,
            coarse_lr: lr,
            fine_lr: lr,
        }
    }

    #[test]
    fn zero_learning_rate_preserves_parameters_bitwise() {
        let ds = toy_dataset();
        let mut params = toy_model();
        let before: Vec<(String, Vec<u64>)> = params
            .values
            .iter()
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        train(&ds, &mut params, &train_cfg(3, 0.0)).unwrap();
        for (name, bits) in before {
            let now: Vec<u64> =
                params.values[&name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, now, "{name} must not move at lr=0");
        }
    }

    #[test]
    fn identical_seeds_give_identical_curves_and_parameters() {
        let ds = toy_dataset();
        let mut a = toy_model();
        let mut b = toy_model();
        let ca = train(&ds, &mut a, &train_cfg(4, 1e-3)).unwrap();
        let cb = train(&ds, &mut b, &train_cfg(4, 1e-3)).unwrap();
        assert_eq!(ca.len(), cb.len());
        for (ra, rb) in ca.iter().zip(&cb) {
            assert!(ra.total().to_bits() == rb.total().to_bits(), "curve must be bitwise equal");
        }
        for (name, t) in &a.values {
            let ta = t.data().iter().map(|v| v.to_bits());
            let tb = b.values[name].data().iter().map(|v| v.to_bits());
            assert!(ta.eq(tb), "{name} must be bitwise equal");
        }
    }

    #[test]
    fn fine_phase_leaves_coarse_parameters_untouched() {
        let ds = toy_dataset();
        let mut params = toy_model();
        let coarse_before: Vec<(String, Vec<u64>)> = params
            .values
            .iter()
            .filter(|(n, _)| !n.starts_with("fine."))
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let fine_before: Vec<u64> =
            params.values["fine.reg_w1"].data().iter().map(|v| v.to_bits()).collect();
        train_fine(&ds, &mut params, &train_cfg(5, 1e-3)).unwrap();
        for (name, bits) in coarse_before {
            let now: Vec<u64> =
                params.values[&name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, now, "{name} must not move in the fine phase");
        }
        let fine_after: Vec<u64> =
            params.values["fine.reg_w1"].data().iter().map(|v| v.to_bits()).collect();
        assert_ne!(fine_before, fine_after, "fine parameters must move");
    }

    #[test]
    fn batches_contain_distinct_submaps() {
        let ds = toy_dataset();
        let sampler = BatchSampler::new(&ds, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pairs = sampler.draw(&mut rng);
            let mut ids: Vec<u64> = pairs.iter().map(|p| p.submap.id).collect();
            let before = ids.len();
            ids.dedup();
            assert_eq!(ids.len(), before, "duplicate submap in batch");
            for p in &pairs {
                assert_eq!(p.query.gt_submap, p.submap.id, "diagonal positive broken");
            }
        }
    }

    #[test]
    fn coarse_training_reduces_loss_on_a_tiny_world() {
        let ds = toy_dataset();
        let mut params = toy_model();
        let curve = train_coarse(
            &ds,
            &mut params,
            &TrainConfig {
                seed: 9,
                batch: 4,
                coarse_steps: 30,
                fine_steps: 0,
                coarse_lr: 5e-3,
                fine_lr: 0.0,
            },
        )
        .unwrap();
        let first = curve[0].total();
        let last5: f64 = curve[curve.len() - 5..].iter().map(|r| r.total()).sum::<f64>() / 5.0;
        assert!(
            last5 < first,
            "mean of last 5 losses {last5} should undercut the first {first}"
        );
    }

    #[test]
    fn adam_moves_only_named_gradients() {
        let mut params = ParamMap::new();
        params.insert("a".into(), crate::tensor::Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        params.insert("b".into(), crate::tensor::Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![0.5, -0.5]);
        let mut adam = Adam::new(1e-2);
        adam.step(&mut params, &grads);
        assert_ne!(params["a"].data(), &[1.0, 2.0]);
        assert_eq!(params["b"].data(), &[3.0, 4.0]);
    }
}
