//! Fit configuration: `key=value` files and command-line overrides.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FieldConfig, DEFAULT_K, DEFAULT_WINDOW};
use crate::hyper::ConditioningMode;
use crate::io::parse_key_values;
use crate::optim::loss::{CorrespondenceConfig, LossWeights};
use crate::optim::params::{group, Group, ParamVec, NUM_PARAMS};
use crate::scene::InitConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub dynamic: f64,
    pub time: f64,
    pub orientation: f64,
    pub cholesky: f64,
    pub cross: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1e-3,
            scale: 1e-3,
            rotation: 5e-3,
            opacity: 1e-2,
            color: 5e-3,
            dynamic: 1e-3,
            time: 1e-3,
            orientation: 1e-3,
            cholesky: 2e-3,
            cross: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn per_param(&self, factor: f64) -> ParamVec {
        let mut out = [0.0; NUM_PARAMS];
        for (k, v) in out.iter_mut().enumerate() {
            *v = factor
                * match group(k) {
                    Group::Position => self.position,
                    Group::Scale => self.scale,
                    Group::Rotation => self.rotation,
                    Group::Opacity => self.opacity,
                    Group::Color => self.color,
                    Group::DynamicGeometry => self.dynamic,
                    Group::Time => self.time,
                    Group::Orientation => self.orientation,
                    Group::Cholesky => self.cholesky,
                    Group::Cross => self.cross,
                };
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub iters: usize,
    pub weights: LossWeights,
    pub correspondence: CorrespondenceConfig,
    pub seed: u64,
    pub prune_eps: f64,
    /// Mean positional-gradient norm above which a primitive is duplicated.
    pub densify_grad: f64,
    pub densify_interval: usize,
    pub densify_until: usize,
    pub max_primitives: usize,
    /// Frames per iteration.
    pub batch: usize,
    pub variant: ConditioningMode,
    /// Every n-th frame (starting at n - 1) is held out from training; 0 disables.
    pub holdout_every: usize,
    pub field: FieldConfig,
    pub skin_k: usize,
    pub lr: LearningRates,
    /// Learning-rate multiplier reached at the last iteration (exponential decay).
    pub lr_decay: f64,
    pub init: InitConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iters: 2000,
            weights: LossWeights::default(),
            correspondence: CorrespondenceConfig::default(),
            seed: 7,
            prune_eps: 0.005,
            densify_grad: 2e-4,
            densify_interval: 200,
            densify_until: 500,
            max_primitives: 200,
            batch: 1,
            variant: ConditioningMode::Full,
            holdout_every: 0,
            field: FieldConfig {
                k: DEFAULT_K,
                window: DEFAULT_WINDOW,
            },
            skin_k: 4,
            lr: LearningRates::default(),
            lr_decay: 0.1,
            init: InitConfig::default(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "iters",
    "lambda_pho",
    "lambda_cor",
    "lambda_arap",
    "huber_delta",
    "lambda_depth",
    "seed",
    "prune_eps",
    "densify_grad",
    "densify_interval",
    "densify_until",
    "max_primitives",
    "batch",
    "variant",
    "holdout_every",
    "k",
    "window",
    "skin_k",
    "lr_position",
    "lr_scale",
    "lr_rotation",
    "lr_opacity",
    "lr_color",
    "lr_dynamic",
    "lr_time",
    "lr_orientation",
    "lr_cholesky",
    "lr_cross",
    "lr_decay",
    "init_scale",
    "init_opacity",
    "init_time_sigma",
    "init_orientation_sigma",
];

impl FitConfig {
    /// Sets one key; unknown keys and malformed values are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<f64> {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("`{key}` must be a number, got `{value}`")))
        };
        let int = || -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("`{key}` must be a nonnegative integer, got `{value}`")))
        };
        match key {
            "iters" => self.iters = int()?,
            "lambda_pho" => self.weights.photometric = num()?,
            "lambda_cor" => self.weights.correspondence = num()?,
            "lambda_arap" => self.weights.arap = num()?,
            "huber_delta" => self.correspondence.delta = num()?,
            "lambda_depth" => self.correspondence.depth_weight = num()?,
            "seed" => self.seed = int()? as u64,
            "prune_eps" => self.prune_eps = num()?,
            "densify_grad" => self.densify_grad = num()?,
            "densify_interval" => self.densify_interval = int()?,
            "densify_until" => self.densify_until = int()?,
            "max_primitives" => self.max_primitives = int()?,
            "batch" => self.batch = int()?,
            "variant" => self.variant = value.parse()?,
            "holdout_every" => self.holdout_every = int()?,
            "k" => self.field.k = int()?,
            "window" => self.field.window = int()?,
            "skin_k" => self.skin_k = int()?,
            "lr_position" => self.lr.position = num()?,
            "lr_scale" => self.lr.scale = num()?,
            "lr_rotation" => self.lr.rotation = num()?,
            "lr_opacity" => self.lr.opacity = num()?,
            "lr_color" => self.lr.color = num()?,
            "lr_dynamic" => self.lr.dynamic = num()?,
            "lr_time" => self.lr.time = num()?,
            "lr_orientation" => self.lr.orientation = num()?,
            "lr_cholesky" => self.lr.cholesky = num()?,
            "lr_cross" => self.lr.cross = num()?,
            "lr_decay" => self.lr_decay = num()?,
            "init_scale" => self.init.scale_fraction = num()?,
            "init_opacity" => self.init.opacity = num()?,
            "init_time_sigma" => self.init.time_sigma = num()?,
            "init_orientation_sigma" => self.init.orientation_sigma = num()?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "iters" => self.iters.to_string(),
            "lambda_pho" => self.weights.photometric.to_string(),
            "lambda_cor" => self.weights.correspondence.to_string(),
            "lambda_arap" => self.weights.arap.to_string(),
            "huber_delta" => self.correspondence.delta.to_string(),
            "lambda_depth" => self.correspondence.depth_weight.to_string(),
            "seed" => self.seed.to_string(),
            "prune_eps" => self.prune_eps.to_string(),
            "densify_grad" => self.densify_grad.to_string(),
            "densify_interval" => self.densify_interval.to_string(),
            "densify_until" => self.densify_until.to_string(),
            "max_primitives" => self.max_primitives.to_string(),
            "batch" => self.batch.to_string(),
            "variant" => self.variant.to_string(),
            "holdout_every" => self.holdout_every.to_string(),
            "k" => self.field.k.to_string(),
            "window" => self.field.window.to_string(),
            "skin_k" => self.skin_k.to_string(),
            "lr_position" => self.lr.position.to_string(),
            "lr_scale" => self.lr.scale.to_string(),
            "lr_rotation" => self.lr.rotation.to_string(),
            "lr_opacity" => self.lr.opacity.to_string(),
            "lr_color" => self.lr.color.to_string(),
            "lr_dynamic" => self.lr.dynamic.to_string(),
            "lr_time" => self.lr.time.to_string(),
            "lr_orientation" => self.lr.orientation.to_string(),
            "lr_cholesky" => self.lr.cholesky.to_string(),
            "lr_cross" => self.lr.cross.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "init_scale" => self.init.scale_fraction.to_string(),
            "init_opacity" => self.init.opacity.to_string(),
            "init_time_sigma" => self.init.time_sigma.to_string(),
            "init_orientation_sigma" => self.init.orientation_sigma.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Every key, one `key=value` line each; parses back to an equal config.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = FitConfig::default();
        for (k, (line, v)) in parse_key_values(text, path)? {
            cfg.set(&k, &v).map_err(|e| Error::parse(path, line, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.field.validate()?;
        if !(self.prune_eps > 0.0 && self.densify_grad > 0.0) {
            return Err(Error::Config("prune_eps and densify_grad must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be at least 1".into()));
        }
        if self.skin_k == 0 {
            return Err(Error::Config("skin_k must be at least 1".into()));
        }
        if self.holdout_every == 1 {
            return Err(Error::Config("holdout_every=1 would hold out every frame".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        if !(self.correspondence.delta > 0.0 && self.correspondence.depth_weight >= 0.0) {
            return Err(Error::Config("huber_delta must be positive and lambda_depth nonnegative".into()));
        }
        let lr = self.lr.per_param(1.0);
        if lr.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if !(self.init.scale_fraction > 0.0
            && (0.0..=1.0).contains(&self.init.opacity)
            && self.init.time_sigma > 0.0
            && self.init.orientation_sigma > 0.0)
        {
            return Err(Error::Config("initialization values are out of range".into()));
        }
        Ok(())
    }

    /// Training and held-out frame indices for a sequence of `frames`.
    pub fn split_frames(&self, frames: usize) -> (Vec<usize>, Vec<usize>) {
        if self.holdout_every < 2 {
            return ((0..frames).collect(), Vec::new());
        }
        (0..frames).partition(|&f| (f + 1) % self.holdout_every != 0)
    }
}
