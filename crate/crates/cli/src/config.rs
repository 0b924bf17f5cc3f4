//! Flat `key = value` run configuration.
//!
//! Values are read as JSON when they parse as such (`64`, `1e-5`, `true`,
//! `[32,64,128]`) and as bare strings otherwise (`sigma-vae`). Later sources
//! override earlier ones: defaults, then `--config` files, then `--set`
//! pairs, then dedicated flags.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use pcae::geometry::AugmentParams;
use pcae::models::{ModelConfig, Variant};
use pcae::seed;
use pcae::synthdata::{ShapeParams, SplitSpec};
use pcae::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// File name of the echoed configuration in every output directory.
pub const CONFIG_FILE: &str = "config.txt";

/// Architecture preset that the explicit model keys refine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Desk,
    Reduced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; data, initialisation, augmentation and sampling use
    /// named streams derived from it.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Points per cloud, shared by the generator and the model.
    pub n_points: usize,

    pub body_axes: [f64; 3],
    pub process_count: usize,
    pub process_length: f64,
    pub process_radius: f64,
    pub body_variation: f64,
    pub process_variation: f64,
    pub process_angle_variation: f64,
    pub point_noise: f64,
    pub severity_min: f64,
    pub severity_max: f64,
    pub train_healthy: usize,
    pub train_fractured: usize,
    pub val_healthy: usize,
    pub val_fractured: usize,
    pub test_healthy: usize,
    pub test_fractured: usize,

    pub variant: Variant,
    pub preset: Preset,
    pub point_widths: Option<Vec<usize>>,
    pub head_widths: Option<Vec<usize>>,
    pub latent_dim: Option<usize>,
    pub conv_channels: Option<Vec<usize>>,
    pub dense_widths: Option<Vec<usize>>,
    pub leaky_slope: Option<f64>,
    pub variance_eps: Option<f64>,
    pub init_variance: Option<f64>,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta_max: f64,
    pub anneal_fraction: f64,
    pub augment: bool,
    pub jitter_sigma: f64,
    pub max_angle_deg: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub smoothing: usize,
    pub weighted_matching: bool,
    pub freeze_batch_norm: bool,
    pub restore_best: bool,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let shape = ShapeParams::default();
        let split = SplitSpec::default();
        let train = TrainConfig::new(ModelConfig::desk(Variant::SigmaVae));
        let aug = AugmentParams::default();
        RunConfig {
            seed: 0,
            threads: 0,
            n_points: train.model.n_points,
            body_axes: shape.body_axes,
            process_count: shape.process_count,
            process_length: shape.process_length,
            process_radius: shape.process_radius,
            body_variation: shape.body_variation,
            process_variation: shape.process_variation,
            process_angle_variation: shape.process_angle_variation,
            point_noise: shape.point_noise,
            severity_min: 0.3,
            severity_max: 0.7,
            train_healthy: split.train_healthy,
            train_fractured: split.train_fractured,
            val_healthy: split.val_healthy,
            val_fractured: split.val_fractured,
            test_healthy: split.test_healthy,
            test_fractured: split.test_fractured,
            variant: train.model.variant,
            preset: Preset::Desk,
            point_widths: None,
            head_widths: None,
            latent_dim: None,
            conv_channels: None,
            dense_widths: None,
            leaky_slope: None,
            variance_eps: None,
            init_variance: None,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            beta_max: train.beta_max,
            anneal_fraction: train.anneal_fraction,
            augment: train.augment.is_some(),
            jitter_sigma: aug.jitter_sigma,
            max_angle_deg: aug.max_angle_deg,
            patience: train.patience,
            min_delta: train.min_delta,
            smoothing: train.smoothing,
            weighted_matching: train.weighted_matching,
            freeze_batch_norm: train.freeze_batch_norm,
            restore_best: train.restore_best,
            checkpoint_every: 10,
        }
    }
}

/// Ordered key/value overrides.
pub type Overrides = Vec<(String, String)>;

/// Parses one `key=value` pair.
pub fn parse_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() {
        bail!("empty key in `{s}`");
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Parses a configuration file: one pair per line, `#` starts a comment.
pub fn parse_text(text: &str) -> Result<Overrides> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_pair(line).with_context(|| format!("line {}", i + 1))?);
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Overrides> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_text(&text).with_context(|| format!("in {}", path.display()))
}

fn to_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Applies `overrides` in order on top of the defaults.
    pub fn from_overrides(overrides: &[(String, String)]) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(RunConfig::default())? else {
            unreachable!("config serialises to an object")
        };
        for (k, v) in overrides {
            if !map.contains_key(k) {
                bail!("unknown configuration key `{k}`");
            }
            map.insert(k.clone(), to_value(v));
            // Checked per key so the message can name it.
            serde_json::from_value::<RunConfig>(Value::Object(map.clone()))
                .map_err(|e| anyhow!("invalid value `{v}` for `{k}`: {e}"))?;
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(map))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills the architecture keys left open from the preset.
    pub fn resolved(mut self) -> Self {
        let base = self.preset_model();
        self.point_widths.get_or_insert(base.point_widths);
        self.head_widths.get_or_insert(base.head_widths);
        self.latent_dim.get_or_insert(base.latent_dim);
        self.conv_channels.get_or_insert(base.conv_channels);
        self.dense_widths.get_or_insert(base.dense_widths);
        self.leaky_slope.get_or_insert(base.leaky_slope);
        self.variance_eps.get_or_insert(base.variance_eps);
        self.init_variance.get_or_insert(base.init_variance);
        self
    }

    fn preset_model(&self) -> ModelConfig {
        match self.preset {
            Preset::Full => ModelConfig::full(self.variant),
            Preset::Desk => ModelConfig::desk(self.variant),
            Preset::Reduced => ModelConfig::reduced(self.variant),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity_min)
            || !(self.severity_min..=1.0).contains(&self.severity_max)
        {
            bail!("severity range must satisfy 0 <= severity_min <= severity_max <= 1");
        }
        self.shape().validate()?;
        self.train().validate()?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        let base = self.preset_model();
        ModelConfig {
            variant: self.variant,
            n_points: self.n_points,
            point_widths: self.point_widths.clone().unwrap_or(base.point_widths),
            head_widths: self.head_widths.clone().unwrap_or(base.head_widths),
            latent_dim: self.latent_dim.unwrap_or(base.latent_dim),
            conv_channels: self.conv_channels.clone().unwrap_or(base.conv_channels),
            dense_widths: self.dense_widths.clone().unwrap_or(base.dense_widths),
            leaky_slope: self.leaky_slope.unwrap_or(base.leaky_slope),
            variance_eps: self.variance_eps.unwrap_or(base.variance_eps),
            init_variance: self.init_variance.unwrap_or(base.init_variance),
        }
    }

    pub fn shape(&self) -> ShapeParams {
        ShapeParams {
            body_axes: self.body_axes,
            process_count: self.process_count,
            process_length: self.process_length,
            process_radius: self.process_radius,
            body_variation: self.body_variation,
            process_variation: self.process_variation,
            process_angle_variation: self.process_angle_variation,
            point_noise: self.point_noise,
            n_points: self.n_points,
        }
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train_healthy: self.train_healthy,
            train_fractured: self.train_fractured,
            val_healthy: self.val_healthy,
            val_fractured: self.val_fractured,
            test_healthy: self.test_healthy,
            test_fractured: self.test_fractured,
        }
    }

    pub fn severity(&self) -> (f64, f64) {
        (self.severity_min, self.severity_max)
    }

    pub fn data_seed(&self) -> u64 {
        seed::derive(self.seed, "data")
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            model: self.model(),
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            beta_max: self.beta_max,
            anneal_fraction: self.anneal_fraction,
            seed: seed::derive(self.seed, "train"),
            augment: self.augment.then_some(AugmentParams {
                jitter_sigma: self.jitter_sigma,
                max_angle_deg: self.max_angle_deg,
            }),
            patience: self.patience,
            min_delta: self.min_delta,
            smoothing: self.smoothing,
            weighted_matching: self.weighted_matching,
            freeze_batch_norm: self.freeze_batch_norm,
            restore_best: self.restore_best,
        }
    }

    /// One `key = value` line per field, in declaration order.
    pub fn to_text(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serialises") else {
            unreachable!("config serialises to an object")
        };
        let mut s = String::new();
        for (k, v) in map {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}
