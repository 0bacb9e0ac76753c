//! Training configuration as a flat `key = value` file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::encoders::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion::{validate_threshold, DEFAULT_GATE_THRESHOLD};
use crate::loss::LossWeights;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackboneKind {
    #[default]
    Resnet34,
    Tiny,
}

impl BackboneKind {
    pub fn config(self, input_size: usize) -> BackboneConfig {
        let base = match self {
            BackboneKind::Resnet34 => BackboneConfig::resnet34(),
            BackboneKind::Tiny => BackboneConfig::tiny(),
        };
        BackboneConfig { input_size, ..base }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Resnet34 => "resnet34",
            BackboneKind::Tiny => "tiny",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet34" => Ok(BackboneKind::Resnet34),
            "tiny" => Ok(BackboneKind::Tiny),
            other => Err(Error::config("backbone", format!("unknown backbone `{other}` (expected resnet34 or tiny)"))),
        }
    }
}

/// Ablation switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub disable_temporal: bool,
    pub disable_ila: bool,
    pub disable_ilw: bool,
    pub disable_bma: bool,
}

impl Ablation {
    pub fn all() -> Self {
        Ablation { disable_temporal: true, disable_ila: true, disable_ilw: true, disable_bma: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_len: usize,
    pub input_size: usize,
    pub loss_w1: f64,
    pub loss_w2: f64,
    pub gate_threshold: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub backbone: BackboneKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 65,
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-5,
            clip_len: 4,
            input_size: 352,
            loss_w1: 0.6,
            loss_w2: 0.4,
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            seed: 0,
            ablation: Ablation::default(),
            backbone: BackboneKind::Resnet34,
        }
    }
}

pub const CONFIG_KEYS: [&str; 15] = [
    "epochs",
    "learning_rate",
    "momentum",
    "weight_decay",
    "clip_len",
    "input_size",
    "loss_w1",
    "loss_w2",
    "gate_threshold",
    "seed",
    "disable_temporal",
    "disable_ila",
    "disable_ilw",
    "disable_bma",
    "backbone",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::config(key, format!("`{v}`: {e}")))
}

impl TrainConfig {
    /// Small-model defaults used by tests and smoke runs.
    pub fn tiny() -> Self {
        TrainConfig { input_size: 32, backbone: BackboneKind::Tiny, ..Self::default() }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        self.backbone.config(self.input_size)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { spatial: self.loss_w1, temporal: self.loss_w2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(Error::config("clip_len", "must be at least 1"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config("input_size", format!("{} is not a positive multiple of 32", self.input_size)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("{} must be a nonnegative number", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("{} is outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", format!("{} must be a nonnegative number", self.weight_decay)));
        }
        self.loss_weights().validate()?;
        validate_threshold(self.gate_threshold)?;
        self.backbone_config().validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_len" => self.clip_len = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "loss_w1" => self.loss_w1 = parse(key, value)?,
            "loss_w2" => self.loss_w2 = parse(key, value)?,
            "gate_threshold" => self.gate_threshold = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "disable_temporal" => self.ablation.disable_temporal = parse(key, value)?,
            "disable_ila" => self.ablation.disable_ila = parse(key, value)?,
            "disable_ilw" => self.ablation.disable_ilw = parse(key, value)?,
            "disable_bma" => self.ablation.disable_bma = parse(key, value)?,
            "backbone" => self.backbone = value.parse()?,
            other => return Err(Error::config(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Parses a config file body. Missing keys keep their defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "given more than once"));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// `(key, value)` pairs in a fixed order; values round-trip through [`TrainConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = self.ablation;
        vec![
            ("epochs", self.epochs.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("momentum", format!("{:?}", self.momentum)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("clip_len", self.clip_len.to_string()),
            ("input_size", self.input_size.to_string()),
            ("loss_w1", format!("{:?}", self.loss_w1)),
            ("loss_w2", format!("{:?}", self.loss_w2)),
            ("gate_threshold", format!("{:?}", self.gate_threshold)),
            ("seed", self.seed.to_string()),
            ("disable_temporal", a.disable_temporal.to_string()),
            ("disable_ila", a.disable_ila.to_string()),
            ("disable_ilw", a.disable_ilw.to_string()),
            ("disable_bma", a.disable_bma.to_string()),
            ("backbone", self.backbone.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
