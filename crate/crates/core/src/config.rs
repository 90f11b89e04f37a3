//! Run configuration.
//!
//! The on-disk format is flat `dotted.key = value` text (a TOML subset).
//! Absent keys take their defaults; unknown keys are rejected. Every key can
//! be overridden from the environment as `BLEEDSCOPE_<KEY>` where dots become
//! double underscores, e.g. `BLEEDSCOPE_TRAIN__LR_OTHER=1e-3`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{Error, IoContext, Result};

pub const ENV_PREFIX: &str = "BLEEDSCOPE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowBackend {
    Classical,
    Injected,
    External,
}

impl FlowBackend {
    pub fn as_str(&self) -> &'static str {
        match self {
            FlowBackend::Classical => "classical",
            FlowBackend::Injected => "injected",
            FlowBackend::External => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetNormalization {
    /// Divide the masked flow sum by the full pixel count H·W.
    PaperHw,
    /// Divide by the number of background pixels.
    BackgroundCount,
}

impl OffsetNormalization {
    pub fn as_str(&self) -> &'static str {
        match self {
            OffsetNormalization::PaperHw => "paper_hw",
            OffsetNormalization::BackgroundCount => "background_count",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaborParams {
    pub wavelength: f64,
    pub orientations: usize,
    pub phase: f64,
    pub sigma: f64,
    pub aspect: f64,
    pub kernel_size: usize,
}

impl GaborParams {
    pub fn thetas(&self) -> Vec<f64> {
        (0..self.orientations)
            .map(|k| k as f64 * std::f64::consts::PI / self.orientations as f64)
            .collect()
    }
}

impl Default for GaborParams {
    fn default() -> Self {
        Self {
            wavelength: 4.0,
            orientations: 4,
            phase: 0.0,
            sigma: 2.0,
            aspect: 0.5,
            kernel_size: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub region: f64,
    pub edge: f64,
    pub score: f64,
    pub point: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            region: 1.0,
            edge: 1.0,
            score: 1.0,
            point: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub epochs: usize,
    /// 0 selects 5% of the total step count.
    pub warmup_steps: u64,
    /// 0 means `epochs × windows per epoch`. A nonzero value also caps the run.
    pub total_steps: u64,
    /// Fraction of total steps during which ground-truth masks replace
    /// predicted masks in the background-offset computation.
    pub teacher_forcing: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr_encoder: 5e-6,
            lr_other: 5e-4,
            epochs: 20,
            warmup_steps: 0,
            total_steps: 0,
            teacher_forcing: 0.25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    pub backend: FlowBackend,
    pub levels: usize,
    pub warps: usize,
    pub iterations: usize,
    pub smoothness: f64,
    pub external_dir: String,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            backend: FlowBackend::Classical,
            levels: 3,
            warps: 5,
            iterations: 40,
            smoothness: 0.5,
            external_dir: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    pub window_size: usize,
    pub input_resolution: usize,
    pub channels: usize,
    pub channels_f1: usize,
    pub channels_f2: usize,
    pub memory_capacity: usize,
    pub num_heads: usize,
    pub decoder_depth: usize,
    pub temporal_embedding: bool,
    pub point_memory: bool,
    pub edge_fusion: bool,
    pub gabor: GaborParams,
    pub loss: LossWeights,
    pub train: TrainParams,
    pub flow: FlowParams,
    pub offset_normalization: OffsetNormalization,
    pub pck_thresholds: Vec<f64>,
    pub existence_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window_size: 8,
            input_resolution: 512,
            channels: 256,
            channels_f1: 32,
            channels_f2: 64,
            memory_capacity: 7,
            num_heads: 8,
            decoder_depth: 2,
            temporal_embedding: true,
            point_memory: true,
            edge_fusion: true,
            gabor: GaborParams::default(),
            loss: LossWeights::default(),
            train: TrainParams::default(),
            flow: FlowParams::default(),
            offset_normalization: OffsetNormalization::PaperHw,
            pck_thresholds: vec![0.02, 0.05, 0.10],
            existence_threshold: 0.5,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::ConfigValidation {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(invalid(key, format!("expected a number, got {v}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(invalid(key, format!("expected a nonnegative integer, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| invalid(key, format!("expected a boolean, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| invalid(key, format!("expected a string, got {v}")))
}

impl ModelConfig {
    /// Small CPU-friendly model: 128×128 input, 64 channels.
    pub fn toy() -> Self {
        Self {
            input_resolution: 128,
            channels: 64,
            channels_f1: 16,
            channels_f2: 32,
            num_heads: 4,
            ..Self::default()
        }
    }

    /// Parse config text. Defaults fill absent keys; the result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::ConfigParse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        Self::from_flat(&flat)
    }

    fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut capacity_set = false;
        for (key, value) in flat {
            if key == "model.memory_capacity" {
                capacity_set = true;
            }
            cfg.set(key, value)?;
        }
        if !capacity_set {
            cfg.memory_capacity = cfg.window_size.saturating_sub(1);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "model.window_size" => self.window_size = as_usize(key, v)?,
            "model.input_resolution" => self.input_resolution = as_usize(key, v)?,
            "model.channels" => self.channels = as_usize(key, v)?,
            "model.channels_f1" => self.channels_f1 = as_usize(key, v)?,
            "model.channels_f2" => self.channels_f2 = as_usize(key, v)?,
            "model.memory_capacity" => self.memory_capacity = as_usize(key, v)?,
            "model.num_heads" => self.num_heads = as_usize(key, v)?,
            "model.decoder_depth" => self.decoder_depth = as_usize(key, v)?,
            "model.temporal_embedding" => self.temporal_embedding = as_bool(key, v)?,
            "model.point_memory" => self.point_memory = as_bool(key, v)?,
            "model.edge_fusion" => self.edge_fusion = as_bool(key, v)?,
            "gabor.wavelength" => self.gabor.wavelength = as_f64(key, v)?,
            "gabor.orientations" => self.gabor.orientations = as_usize(key, v)?,
            "gabor.phase" => self.gabor.phase = as_f64(key, v)?,
            "gabor.sigma" => self.gabor.sigma = as_f64(key, v)?,
            "gabor.aspect" => self.gabor.aspect = as_f64(key, v)?,
            "gabor.kernel_size" => self.gabor.kernel_size = as_usize(key, v)?,
            "loss.region" => self.loss.region = as_f64(key, v)?,
            "loss.edge" => self.loss.edge = as_f64(key, v)?,
            "loss.score" => self.loss.score = as_f64(key, v)?,
            "loss.point" => self.loss.point = as_f64(key, v)?,
            "loss.focal_alpha" => self.loss.focal_alpha = as_f64(key, v)?,
            "loss.focal_gamma" => self.loss.focal_gamma = as_f64(key, v)?,
            "loss.dice_eps" => self.loss.dice_eps = as_f64(key, v)?,
            "train.lr_encoder" => self.train.lr_encoder = as_f64(key, v)?,
            "train.lr_other" => self.train.lr_other = as_f64(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.warmup_steps" => self.train.warmup_steps = as_u64(key, v)?,
            "train.total_steps" => self.train.total_steps = as_u64(key, v)?,
            "train.teacher_forcing" => self.train.teacher_forcing = as_f64(key, v)?,
            "train.adam_beta1" => self.train.adam_beta1 = as_f64(key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = as_f64(key, v)?,
            "train.adam_eps" => self.train.adam_eps = as_f64(key, v)?,
            "flow.backend" => {
                self.flow.backend = match as_str(key, v)? {
                    "classical" => FlowBackend::Classical,
                    "injected" => FlowBackend::Injected,
                    "external" => FlowBackend::External,
                    other => return Err(invalid(key, format!("unknown flow backend `{other}`"))),
                }
            }
            "flow.levels" => self.flow.levels = as_usize(key, v)?,
            "flow.warps" => self.flow.warps = as_usize(key, v)?,
            "flow.iterations" => self.flow.iterations = as_usize(key, v)?,
            "flow.smoothness" => self.flow.smoothness = as_f64(key, v)?,
            "flow.external_dir" => self.flow.external_dir = as_str(key, v)?.to_string(),
            "offset.normalization" => {
                self.offset_normalization = match as_str(key, v)? {
                    "paper_hw" => OffsetNormalization::PaperHw,
                    "background_count" => OffsetNormalization::BackgroundCount,
                    other => return Err(invalid(key, format!("unknown normalization `{other}`"))),
                }
            }
            "eval.pck_thresholds" => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| invalid(key, "expected an array of fractions"))?;
                self.pck_thresholds = arr.iter().map(|x| as_f64(key, x)).collect::<Result<_>>()?;
            }
            "eval.existence_threshold" => self.existence_threshold = as_f64(key, v)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 {
            return Err(invalid("model.window_size", "must be at least 2"));
        }
        if self.memory_capacity != self.window_size - 1 {
            return Err(invalid(
                "model.memory_capacity",
                format!("must equal window_size - 1 = {}", self.window_size - 1),
            ));
        }
        if self.input_resolution < 16 || self.input_resolution % 16 != 0 {
            return Err(invalid("model.input_resolution", "must be a positive multiple of 16"));
        }
        for (key, c) in [
            ("model.channels", self.channels),
            ("model.channels_f1", self.channels_f1),
            ("model.channels_f2", self.channels_f2),
        ] {
            if c == 0 || c % 8 != 0 {
                return Err(invalid(key, "must be a positive multiple of 8"));
            }
        }
        if self.num_heads == 0 || self.channels % self.num_heads != 0 {
            return Err(invalid("model.num_heads", "must divide model.channels"));
        }
        if self.decoder_depth == 0 {
            return Err(invalid("model.decoder_depth", "must be at least 1"));
        }
        let g = &self.gabor;
        for (key, x) in [
            ("gabor.wavelength", g.wavelength),
            ("gabor.sigma", g.sigma),
            ("gabor.aspect", g.aspect),
        ] {
            if !(x.is_finite() && x > 0.0) {
                return Err(invalid(key, "must be positive"));
            }
        }
        if !g.phase.is_finite() {
            return Err(invalid("gabor.phase", "must be finite"));
        }
        if g.kernel_size % 2 == 0 {
            return Err(invalid("gabor.kernel_size", "must be odd"));
        }
        if g.orientations == 0 {
            return Err(invalid("gabor.orientations", "must be at least 1"));
        }
        let l = &self.loss;
        for (key, w) in [
            ("loss.region", l.region),
            ("loss.edge", l.edge),
            ("loss.score", l.score),
            ("loss.point", l.point),
            ("loss.focal_gamma", l.focal_gamma),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(invalid(key, "must be nonnegative"));
            }
        }
        if !(0.0..=1.0).contains(&l.focal_alpha) {
            return Err(invalid("loss.focal_alpha", "must lie in [0, 1]"));
        }
        if !(l.dice_eps > 0.0) {
            return Err(invalid("loss.dice_eps", "must be positive"));
        }
        let t = &self.train;
        for (key, lr) in [("train.lr_encoder", t.lr_encoder), ("train.lr_other", t.lr_other)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(invalid(key, "must be nonnegative"));
            }
        }
        if !(0.0..=1.0).contains(&t.teacher_forcing) {
            return Err(invalid("train.teacher_forcing", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(invalid("train.adam_beta1", "betas must lie in [0, 1)"));
        }
        if !(t.adam_eps > 0.0) {
            return Err(invalid("train.adam_eps", "must be positive"));
        }
        if self.flow.levels == 0 {
            return Err(invalid("flow.levels", "must be at least 1"));
        }
        if !(self.flow.smoothness > 0.0) {
            return Err(invalid("flow.smoothness", "must be positive"));
        }
        if self.pck_thresholds.is_empty() {
            return Err(invalid("eval.pck_thresholds", "must not be empty"));
        }
        for &k in &self.pck_thresholds {
            if !(k > 0.0 && k < 1.0) {
                return Err(invalid("eval.pck_thresholds", format!("{k} is outside (0, 1)")));
            }
        }
        if !(self.existence_threshold > 0.0 && self.existence_threshold < 1.0) {
            return Err(invalid("eval.existence_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, Value)> {
        let f = Value::Float;
        let i = |x: u64| Value::Integer(x as i64);
        let s = |x: &str| Value::String(x.to_string());
        vec![
            ("seed", i(self.seed)),
            ("model.window_size", i(self.window_size as u64)),
            ("model.input_resolution", i(self.input_resolution as u64)),
            ("model.channels", i(self.channels as u64)),
            ("model.channels_f1", i(self.channels_f1 as u64)),
            ("model.channels_f2", i(self.channels_f2 as u64)),
            ("model.memory_capacity", i(self.memory_capacity as u64)),
            ("model.num_heads", i(self.num_heads as u64)),
            ("model.decoder_depth", i(self.decoder_depth as u64)),
            ("model.temporal_embedding", Value::Boolean(self.temporal_embedding)),
            ("model.point_memory", Value::Boolean(self.point_memory)),
            ("model.edge_fusion", Value::Boolean(self.edge_fusion)),
            ("gabor.wavelength", f(self.gabor.wavelength)),
            ("gabor.orientations", i(self.gabor.orientations as u64)),
            ("gabor.phase", f(self.gabor.phase)),
            ("gabor.sigma", f(self.gabor.sigma)),
            ("gabor.aspect", f(self.gabor.aspect)),
            ("gabor.kernel_size", i(self.gabor.kernel_size as u64)),
            ("loss.region", f(self.loss.region)),
            ("loss.edge", f(self.loss.edge)),
            ("loss.score", f(self.loss.score)),
            ("loss.point", f(self.loss.point)),
            ("loss.focal_alpha", f(self.loss.focal_alpha)),
            ("loss.focal_gamma", f(self.loss.focal_gamma)),
            ("loss.dice_eps", f(self.loss.dice_eps)),
            ("train.lr_encoder", f(self.train.lr_encoder)),
            ("train.lr_other", f(self.train.lr_other)),
            ("train.epochs", i(self.train.epochs as u64)),
            ("train.warmup_steps", i(self.train.warmup_steps)),
            ("train.total_steps", i(self.train.total_steps)),
            ("train.teacher_forcing", f(self.train.teacher_forcing)),
            ("train.adam_beta1", f(self.train.adam_beta1)),
            ("train.adam_beta2", f(self.train.adam_beta2)),
            ("train.adam_eps", f(self.train.adam_eps)),
            ("flow.backend", s(self.flow.backend.as_str())),
            ("flow.levels", i(self.flow.levels as u64)),
            ("flow.warps", i(self.flow.warps as u64)),
            ("flow.iterations", i(self.flow.iterations as u64)),
            ("flow.smoothness", f(self.flow.smoothness)),
            ("flow.external_dir", s(&self.flow.external_dir)),
            ("offset.normalization", s(self.offset_normalization.as_str())),
            (
                "eval.pck_thresholds",
                Value::Array(self.pck_thresholds.iter().map(|&k| f(k)).collect()),
            ),
            ("eval.existence_threshold", f(self.existence_threshold)),
        ]
    }

    /// Flat `key = value` text, one key per line, parseable by [`ModelConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Apply `BLEEDSCOPE_*` overrides from the given variables.
    pub fn apply_env<I, K, V>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut flat: BTreeMap<String, Value> = BTreeMap::new();
        for (k, v) in self.entries() {
            flat.insert(k.to_string(), v);
        }
        let mut touched = false;
        let mut capacity_overridden = false;
        for (name, raw) in vars {
            let Some(rest) = name.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = rest.to_ascii_lowercase().replace("__", ".");
            if key == "model.memory_capacity" {
                capacity_overridden = true;
            }
            flat.insert(key, parse_env_value(raw.as_ref()));
            touched = true;
        }
        if !touched {
            return Ok(self.clone());
        }
        let mut cfg = ModelConfig::default();
        for (key, value) in &flat {
            cfg.set(key, value)?;
        }
        if !capacity_overridden {
            cfg.memory_capacity = cfg.window_size.saturating_sub(1);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_env_value(raw: &str) -> Value {
    // Try TOML scalar/array syntax first, fall back to a bare string.
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).at(path)?;
    ModelConfig::parse(&text)
}

/// [`load_config`] followed by environment overrides from the process.
pub fn load_config_with_env(path: Option<&Path>) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => load_config(p)?,
        None => ModelConfig::default(),
    };
    cfg.apply_env(std::env::vars())
}
