//! Run configuration: flat `key = value` text with dotted section keys.
//!
//! ```text
//! # comment
//! seed = 7
//! clahe.clip_limit = 3.0
//! model.input_size = 64
//! ```
//!
//! Later assignments win, so command-line overrides are applied after the
//! file.  Unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::{SyntheticSpec, PIXEL_CLASS_NAMES};
use crate::image::ClaheConfig;
use crate::train::TrainConfig;
use crate::unet::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Grad-CAM settings used by `explain`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDefaults {
    /// Layer to probe; `None` picks the model's default.
    pub layer: Option<String>,
    pub class: usize,
    /// Reduce the class score over true lesion pixels instead of the whole image.
    pub use_mask: bool,
    pub opacity: f64,
}

impl Default for ProbeDefaults {
    fn default() -> Self {
        Self {
            layer: None,
            class: 1,
            use_mask: false,
            opacity: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Seeds corpus generation, the split, initialization and training.
    pub seed: u64,
    pub clahe_enabled: bool,
    pub clahe: ClaheConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub val_ratio: f64,
    pub probe: ProbeDefaults,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            output_dir: PathBuf::from("out"),
            seed: 42,
            clahe_enabled: true,
            clahe: ClaheConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            val_ratio: 0.2,
            probe: ProbeDefaults::default(),
            synth: SyntheticSpec::default(),
        }
    }
}

/// Every key accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "seed",
    "data.root",
    "data.val_ratio",
    "output.dir",
    "clahe.enabled",
    "clahe.tiles_x",
    "clahe.tiles_y",
    "clahe.clip_limit",
    "clahe.bins",
    "model.depth",
    "model.base_channels",
    "model.num_classes",
    "model.input_size",
    "train.epochs",
    "train.chunk_size",
    "train.steps_per_epoch",
    "train.batch_size",
    "train.lr",
    "train.augment",
    "probe.layer",
    "probe.class",
    "probe.use_mask",
    "probe.opacity",
    "synth.benign",
    "synth.malignant",
    "synth.normal",
    "synth.size",
    "synth.noise",
];

/// Splits config text into `(line, key, value)` triples.
pub fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, found `{body}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("invalid key `{k}`"),
            });
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    /// Parses config text over the defaults and validates the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (_, k, v) in parse_entries(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: 0,
                msg: format!("override `{assignment}` is not `key=value`"),
            });
        };
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.val_ratio" => self.val_ratio = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "clahe.enabled" => self.clahe_enabled = parse(key, v)?,
            "clahe.tiles_x" => self.clahe.tiles_x = parse(key, v)?,
            "clahe.tiles_y" => self.clahe.tiles_y = parse(key, v)?,
            "clahe.clip_limit" => self.clahe.clip_limit = parse(key, v)?,
            "clahe.bins" => self.clahe.bins = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.base_channels" => self.model.base_channels = parse(key, v)?,
            "model.num_classes" => self.model.num_classes = parse(key, v)?,
            "model.input_size" => self.model.input_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.chunk_size" => self.train.chunk_size = parse(key, v)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.augment" => self.train.augment = parse(key, v)?,
            "probe.layer" => self.probe.layer = (!v.is_empty()).then(|| v.to_string()),
            "probe.class" => self.probe.class = parse(key, v)?,
            "probe.use_mask" => self.probe.use_mask = parse(key, v)?,
            "probe.opacity" => self.probe.opacity = parse(key, v)?,
            "synth.benign" => self.synth.benign = parse(key, v)?,
            "synth.malignant" => self.synth.malignant = parse(key, v)?,
            "synth.normal" => self.synth.normal = parse(key, v)?,
            "synth.size" => self.synth.size = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Checks every section against its module's invariants and copies the
    /// run seed into the sections that use it.
    pub fn validate(&mut self) -> Result<()> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.clahe.validate().map_err(|e| invalid(&e))?;
        if self.clahe.bins > 1 << 16 || self.clahe.tiles_x > 1024 || self.clahe.tiles_y > 1024 {
            return Err(ConfigError::Invalid("clahe grid or bin count too large".into()));
        }
        self.model.validate().map_err(|e| invalid(&e))?;
        if self.model.input_size > 4096 {
            return Err(ConfigError::Invalid("model.input_size must be at most 4096".into()));
        }
        self.train.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        if self.synth.size > 4096 {
            return Err(ConfigError::Invalid("synth.size must be at most 4096".into()));
        }
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "data.val_ratio must lie in (0, 1), got {}",
                self.val_ratio
            )));
        }
        if self.model.num_classes != PIXEL_CLASS_NAMES.len() {
            return Err(ConfigError::Invalid(format!(
                "model.num_classes must be {} to match the corpus pixel classes, got {}",
                PIXEL_CLASS_NAMES.len(),
                self.model.num_classes
            )));
        }
        if self.probe.class >= self.model.num_classes {
            return Err(ConfigError::Invalid(format!(
                "probe.class {} out of range for {} classes",
                self.probe.class, self.model.num_classes
            )));
        }
        if let Some(layer) = &self.probe.layer {
            if !self.model.layer_names().contains(layer) {
                return Err(ConfigError::Invalid(format!("probe.layer `{layer}` is not a model layer")));
            }
        }
        if !(0.0..=1.0).contains(&self.probe.opacity) {
            return Err(ConfigError::Invalid(format!(
                "probe.opacity must lie in [0, 1], got {}",
                self.probe.opacity
            )));
        }
        Ok(())
    }

    /// Fraction of samples used for training.
    pub fn train_ratio(&self) -> f64 {
        1.0 - self.val_ratio
    }

    pub fn probe_layer(&self) -> String {
        self.probe
            .layer
            .clone()
            .unwrap_or_else(|| self.model.default_probe_layer())
    }

    /// Every key with its current value, in [`KEYS`] order; parseable by
    /// [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let value = match *key {
                "seed" => self.seed.to_string(),
                "data.root" => self
                    .data_root
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                "data.val_ratio" => self.val_ratio.to_string(),
                "output.dir" => self.output_dir.display().to_string(),
                "clahe.enabled" => self.clahe_enabled.to_string(),
                "clahe.tiles_x" => self.clahe.tiles_x.to_string(),
                "clahe.tiles_y" => self.clahe.tiles_y.to_string(),
                "clahe.clip_limit" => self.clahe.clip_limit.to_string(),
                "clahe.bins" => self.clahe.bins.to_string(),
                "model.depth" => self.model.depth.to_string(),
                "model.base_channels" => self.model.base_channels.to_string(),
                "model.num_classes" => self.model.num_classes.to_string(),
                "model.input_size" => self.model.input_size.to_string(),
                "train.epochs" => self.train.epochs.to_string(),
                "train.chunk_size" => self.train.chunk_size.to_string(),
                "train.steps_per_epoch" => self.train.steps_per_epoch.to_string(),
                "train.batch_size" => self.train.batch_size.to_string(),
                "train.lr" => self.train.lr.to_string(),
                "train.augment" => self.train.augment.to_string(),
                "probe.layer" => self.probe.layer.clone().unwrap_or_default(),
                "probe.class" => self.probe.class.to_string(),
                "probe.use_mask" => self.probe.use_mask.to_string(),
                "probe.opacity" => self.probe.opacity.to_string(),
                "synth.benign" => self.synth.benign.to_string(),
                "synth.malignant" => self.synth.malignant.to_string(),
                "synth.normal" => self.synth.normal.to_string(),
                "synth.size" => self.synth.size.to_string(),
                "synth.noise" => self.synth.noise.to_string(),
                _ => unreachable!("KEYS and to_text out of sync"),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }
}
