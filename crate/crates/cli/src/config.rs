//! Line-oriented `key=value` run configuration.
//!
//! One setting per line; blank lines and `#` comments are ignored. Every key
//! is validated against the schema below and unknown keys are rejected, so a
//! typo fails fast instead of silently training with a default.

use std::collections::BTreeMap;
use std::path::Path;

use symploc::data::GenConfig;
use symploc::eval::BranchMode;
use symploc::hyperbolic::GeometryMode;
use symploc::model::ModelConfig;
use symploc::relation::IntegratorVariant;
use symploc::train::TrainConfig;

/// Every tunable of the pipeline, resolved from defaults, the config file,
/// and `--set` overrides in that order.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // dataset generation
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
    pub noise_sigma: f64,
    pub feature_jitter: f64,
    pub disjoint_classes: bool,
    // model
    pub embed_dim: usize,
    pub cheb_order: usize,
    pub geometry: GeometryMode,
    pub integrator: IntegratorVariant,
    pub alpha_res: f64,
    pub gamma: f64,
    pub dt_init: f64,
    // training
    pub batch: usize,
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub coarse_lr: f64,
    pub fine_lr: f64,
    // evaluation
    pub k_list: Vec<usize>,
    pub eps_list: Vec<f64>,
    pub branch: BranchMode,
}

impl Default for RunConfig {
    /// The desk-scale benchmark: 64 submaps, 512 training and 128 held-out
    /// queries, 32-wide descriptors, finishing well inside two thousand
    /// steps on one core.
    fn default() -> Self {
        RunConfig {
            seed: 42,
            num_submaps: 64,
            grid_cols: 8,
            cell_side: 20.0,
            num_classes: 48,
            feature_dim: 16,
            text_dim: 24,
            min_instances: 3,
            max_instances: 6,
            // Hint draws cap at the submap's instance count, so asking for 6
            // describes every instance. Full coverage keeps the per-branch
            // scores comparable: partially described submaps score their
            // undescribed instances against unrelated hints, which ranks the
            // true submap below average and poisons the combined score.
            min_hints: 6,
            max_hints: 6,
            num_train: 512,
            num_val: 128,
            noise_sigma: 0.05,
            feature_jitter: 0.05,
            disjoint_classes: false,
            embed_dim: 32,
            cheb_order: 4,
            geometry: GeometryMode::Gyro,
            integrator: IntegratorVariant::Euler,
            alpha_res: 0.1,
            gamma: 0.07,
            dt_init: 0.1,
            batch: 32,
            coarse_steps: 1500,
            fine_steps: 300,
            coarse_lr: 5e-4,
            fine_lr: 3e-4,
            k_list: vec![1, 3, 5],
            eps_list: vec![5.0, 10.0, 15.0],
            branch: BranchMode::Combined,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key}: {e} (got {value:?})"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true|false, got {value:?}")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| format!("{key}: {e} (got {s:?})")))
        .collect()
}

impl RunConfig {
    /// Set one key. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "num_submaps" => self.num_submaps = parse_num(key, value)?,
            "grid_cols" => self.grid_cols = parse_num(key, value)?,
            "cell_side" => self.cell_side = parse_num(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "text_dim" => self.text_dim = parse_num(key, value)?,
            "min_instances" => self.min_instances = parse_num(key, value)?,
            "max_instances" => self.max_instances = parse_num(key, value)?,
            "min_hints" => self.min_hints = parse_num(key, value)?,
            "max_hints" => self.max_hints = parse_num(key, value)?,
            "num_train" => self.num_train = parse_num(key, value)?,
            "num_val" => self.num_val = parse_num(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "feature_jitter" => self.feature_jitter = parse_num(key, value)?,
            "disjoint_classes" => self.disjoint_classes = parse_bool(key, value)?,
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "cheb_order" => self.cheb_order = parse_num(key, value)?,
            "geometry" => {
                self.geometry = GeometryMode::parse(value)
                    .ok_or_else(|| format!("geometry: expected gyro|radial, got {value:?}"))?;
            }
            "integrator" => {
                self.integrator = IntegratorVariant::parse(value).ok_or_else(|| {
                    format!("integrator: expected euler|symplectic, got {value:?}")
                })?;
            }
            "alpha_res" => self.alpha_res = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "dt_init" => self.dt_init = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "coarse_steps" => self.coarse_steps = parse_num(key, value)?,
            "fine_steps" => self.fine_steps = parse_num(key, value)?,
            "coarse_lr" => self.coarse_lr = parse_num(key, value)?,
            "fine_lr" => self.fine_lr = parse_num(key, value)?,
            "k_list" => self.k_list = parse_list(key, value)?,
            "eps_list" => self.eps_list = parse_list(key, value)?,
            "branch" => {
                self.branch = BranchMode::parse(value).ok_or_else(|| {
                    format!("branch: expected combined|instance|relation|global, got {value:?}")
                })?;
            }
            _ => return Err(format!("unknown config key: {key}")),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", i + 1))?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::parse_str(&text)
    }

    /// Apply `--set key=value` overrides; returns them for provenance
    /// echoing into the metrics file.
    pub fn apply_overrides(
        &mut self,
        sets: &[String],
    ) -> Result<BTreeMap<String, String>, String> {
        let mut echoed = BTreeMap::new();
        for spec in sets {
            let (key, value) = spec
                .split_once('=')
                .ok_or_else(|| format!("--set {spec:?}: expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            self.apply(key, value)?;
            echoed.insert(key.to_string(), value.to_string());
        }
        Ok(echoed)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.gen_config().validate().map_err(|e| e.to_string())?;
        self.model_config().validate().map_err(|e| e.to_string())?;
        if self.batch == 0 {
            return Err("batch must be >= 1".into());
        }
        if !(self.coarse_lr >= 0.0 && self.coarse_lr.is_finite())
            || !(self.fine_lr >= 0.0 && self.fine_lr.is_finite())
        {
            return Err("learning rates must be finite and non-negative".into());
        }
        if self.k_list.is_empty() || self.k_list.iter().any(|&k| k == 0) {
            return Err("k_list must contain positive cutoffs".into());
        }
        if self.eps_list.is_empty()
            || self.eps_list.iter().any(|&e| !(e > 0.0 && e.is_finite()))
        {
            return Err("eps_list must contain positive distances".into());
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            num_submaps: self.num_submaps,
            grid_cols: self.grid_cols,
            cell_side: self.cell_side,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            text_dim: self.text_dim,
            min_instances: self.min_instances,
            max_instances: self.max_instances,
            min_hints: self.min_hints,
            max_hints: self.max_hints,
            num_train: self.num_train,
            num_val: self.num_val,
            noise_sigma: self.noise_sigma,
            feature_jitter: self.feature_jitter,
            disjoint_classes: self.disjoint_classes,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            text_dim: self.text_dim,
            embed_dim: self.embed_dim,
            cheb_order: self.cheb_order,
            geometry: self.geometry,
            integrator: self.integrator,
            alpha_res: self.alpha_res,
            gamma: self.gamma,
            dt_init: self.dt_init,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch: self.batch,
            coarse_steps: self.coarse_steps,
            fine_steps: self.fine_steps,
            coarse_lr: self.coarse_lr,
            fine_lr: self.fine_lr,
        }
    }

    /// The resolved configuration as JSON for the metrics file.
    pub fn echo_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "num_submaps": self.num_submaps,
            "grid_cols": self.grid_cols,
            "cell_side": self.cell_side,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "text_dim": self.text_dim,
            "min_instances": self.min_instances,
            "max_instances": self.max_instances,
            "min_hints": self.min_hints,
            "max_hints": self.max_hints,
            "num_train": self.num_train,
            "num_val": self.num_val,
            "noise_sigma": self.noise_sigma,
            "feature_jitter": self.feature_jitter,
            "disjoint_classes": self.disjoint_classes,
            "embed_dim": self.embed_dim,
            "cheb_order": self.cheb_order,
            "geometry": self.geometry.name(),
            "integrator": self.integrator.name(),
            "alpha_res": self.alpha_res,
            "gamma": self.gamma,
            "dt_init": self.dt_init,
            "batch": self.batch,
            "coarse_steps": self.coarse_steps,
            "fine_steps": self.fine_steps,
            "coarse_lr": self.coarse_lr,
            "fine_lr": self.fine_lr,
            "k_list": self.k_list,
            "eps_list": self.eps_list,
            "branch": self.branch.name(),
        })
    }
}
