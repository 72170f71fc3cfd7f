//! Run configuration: every hyper-parameter of a training or evaluation run
//! in one validated record, loaded from a TOML file plus `key=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::locator::GridScales;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    /// Edgemap/sketch supports, photo queries.
    SketchSupport,
    /// Photo supports, photo queries; no style companions.
    PhotoSupport,
    /// Supports alternate between photo and edgemap; style loss on edgemaps.
    Multimodal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// 2048-channel residual network (ResNet-50 layout), stride 32.
    Reference,
    /// Small randomly initialised CNN for CPU runs, stride 32.
    Tiny,
}

/// Loss-strip baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Identity de-stylization, no transport or style loss.
    BVanilla,
    /// Vanilla plus the transport loss.
    BDa,
    /// Vanilla plus de-stylization and the style loss.
    BStyle,
    /// Everything on.
    BFull,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    /// Safetensors file with backbone weights (reference backbone only).
    pub weights: Option<PathBuf>,
    pub freeze: bool,
    /// Output channels of the tiny backbone.
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Reference,
            weights: None,
            freeze: false,
            channels: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocatorConfig {
    pub scales: Vec<usize>,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        Self {
            scales: vec![8, 12, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Support shots per episode.
    pub k: usize,
    /// Query photos per episode.
    pub m: usize,
    /// Expected base/novel keypoint counts; checked against the dataset when set.
    pub n_base: Option<usize>,
    pub n_novel: Option<usize>,
    /// Gaussian pooling bandwidth, input pixels.
    pub xi: f64,
    pub lambda_kp: f64,
    pub lambda_da: f64,
    /// Unset means 1e-3, or 1e-8 in multimodal mode.
    pub lambda_style: Option<f64>,
    pub variant: Variant,
    pub use_aux: bool,
    pub t_values: Vec<f64>,
    /// Overrides the dataset's auxiliary pairs when non-empty.
    pub aux_pairs: Vec<[usize; 2]>,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Global-norm gradient clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub modality_mode: ModalityMode,
    pub image_size: usize,

    pub dataset: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub mask_dir: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub checkpoint_every: usize,

    /// Classes held out from training for the unseen protocols.
    pub unseen_classes: Vec<String>,
    /// Fraction of each seen class used for training.
    pub train_split: f64,
    pub eval_episodes: usize,
    pub pck_tau: f64,

    pub canny_low: f32,
    pub canny_high: f32,

    pub encoder: EncoderConfig,
    pub locator: LocatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 1,
            m: 5,
            n_base: None,
            n_novel: None,
            xi: 14.0,
            lambda_kp: 0.5,
            lambda_da: 0.001,
            lambda_style: None,
            variant: Variant::BFull,
            use_aux: true,
            t_values: vec![0.25, 0.5, 0.75],
            aux_pairs: Vec::new(),
            iterations: 80_000,
            learning_rate: 1e-4,
            grad_clip: Some(10.0),
            seed: 0,
            modality_mode: ModalityMode::SketchSupport,
            image_size: 384,
            dataset: None,
            cache_dir: None,
            mask_dir: None,
            run_dir: PathBuf::from("runs/default"),
            checkpoint_every: 1000,
            unseen_classes: Vec::new(),
            train_split: 0.7,
            eval_episodes: 1000,
            pck_tau: 0.1,
            canny_low: 100.0,
            canny_high: 200.0,
            encoder: EncoderConfig::default(),
            locator: LocatorConfig::default(),
        }
    }
}

pub const DEFAULT_LAMBDA_STYLE: f64 = 1e-3;
pub const MULTIMODAL_LAMBDA_STYLE: f64 = 1e-8;

impl RunConfig {
    /// Small CPU configuration used by tests and the synthetic benchmark.
    pub fn tiny() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-3,
            eval_episodes: 100,
            checkpoint_every: 500,
            encoder: EncoderConfig {
                backbone: Backbone::Tiny,
                ..EncoderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            context: "config".into(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.dataset, &mut self.cache_dir, &mut self.mask_dir, &mut self.encoder.weights]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.run_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.m < 1 {
            return Err(Error::Config(format!("k and m must be >= 1 (k={}, m={})", self.k, self.m)));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        for (name, v) in [
            ("lambda_kp", self.lambda_kp),
            ("lambda_da", self.lambda_da),
            ("lambda_style", self.lambda_style.unwrap_or(0.0)),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.xi > 0.0) {
            return Err(Error::Config(format!("xi must be > 0, got {}", self.xi)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.t_values.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("t_values must lie in (0, 1)".into()));
        }
        if !(self.train_split > 0.0 && self.train_split <= 1.0) {
            return Err(Error::Config("train_split must lie in (0, 1]".into()));
        }
        if !(self.pck_tau > 0.0) {
            return Err(Error::Config("pck_tau must be > 0".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be > 0 when set".into()));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        GridScales::new(self.locator.scales.clone())?;
        Ok(())
    }

    pub fn scales(&self) -> GridScales {
        GridScales::new(self.locator.scales.clone()).expect("validated scales")
    }

    pub fn lambda_style(&self) -> f64 {
        if !self.variant_uses_style() {
            return 0.0;
        }
        self.lambda_style.unwrap_or(match self.modality_mode {
            ModalityMode::Multimodal => MULTIMODAL_LAMBDA_STYLE,
            _ => DEFAULT_LAMBDA_STYLE,
        })
    }

    pub fn lambda_da(&self) -> f64 {
        match self.variant {
            Variant::BVanilla | Variant::BStyle => 0.0,
            Variant::BDa | Variant::BFull => self.lambda_da,
        }
    }

    fn variant_uses_style(&self) -> bool {
        matches!(self.variant, Variant::BStyle | Variant::BFull)
    }

    /// The de-stylization network is replaced by the identity in the
    /// vanilla and DA-only baselines.
    pub fn use_destyle(&self) -> bool {
        self.variant_uses_style()
    }

    /// Whether S1/S2 companions are encoded at all.
    pub fn needs_style_companions(&self) -> bool {
        self.modality_mode != ModalityMode::PhotoSupport && self.lambda_style() > 0.0
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Stable digest of the configuration, for reports.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// value when it parses as one, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
