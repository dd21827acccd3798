//! Run configuration: every module's config keys in one flat structure,
//! serialized as `key = value` lines with dotted namespaces. Every run
//! writes its resolved config next to its outputs.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::diffusion::{CoeffMode, ScheduleKind};
use crate::dualstream::BackboneConfig;
use crate::error::{Error, Result};

/// Numeric width of the training/inference path. 64-bit is the default;
/// 32-bit is the opt-in speed mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Config(format!("unknown precision '{}'", other))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F64 => write!(f, "f64"),
            Precision::F32 => write!(f, "f32"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub diffusion_t: usize,
    pub schedule: ScheduleKind,
    pub sampling_steps: usize,
    pub coeff_mode: CoeffMode,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hflip_prob: f64,
    pub seed: u64,
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// Joint-angle oscillation scale of the synthetic generator.
    pub amplitude: f64,
    /// Millimeters per model pose unit.
    pub pose_scale_mm: f64,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::desk(),
            diffusion_t: 1000,
            schedule: ScheduleKind::Cosine,
            sampling_steps: 1,
            coeff_mode: CoeffMode::Standard,
            lr: 5e-4,
            lr_decay: 0.99,
            weight_decay: 0.1,
            epochs: 30,
            batch_size: 16,
            hflip_prob: 0.5,
            seed: 0,
            train_sequences: 500,
            test_sequences: 100,
            amplitude: 0.5,
            pose_scale_mm: 1000.0,
            precision: Precision::F64,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.diffusion_t < 1 {
            return Err(Error::Config("diffusion.T must be at least 1".into()));
        }
        if self.sampling_steps < 1 || self.sampling_steps > self.diffusion_t {
            return Err(Error::Config(format!(
                "diffusion.steps = {} must lie in 1..={}",
                self.sampling_steps, self.diffusion_t
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("optim.lr_decay = {} outside (0, 1]", self.lr_decay)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config("optim.weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 && false {
            // zero epochs is allowed: the checkpoint equals initialization
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config("train.hflip_prob must lie in [0, 1]".into()));
        }
        if self.train_sequences == 0 || self.test_sequences == 0 {
            return Err(Error::Config("data.train_sequences/test_sequences must be positive".into()));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::Config("data.amplitude must be non-negative".into()));
        }
        if !(self.pose_scale_mm > 0.0) {
            return Err(Error::Config("data.pose_scale_mm must be positive".into()));
        }
        Ok(())
    }

    /// Serializes every key, sorted, as `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut kv = BTreeMap::new();
        let b = &self.backbone;
        kv.insert("backbone.d", b.d.to_string());
        kv.insert("backbone.d_prime", b.d_prime.to_string());
        kv.insert("backbone.depth", b.depth.to_string());
        kv.insert("backbone.heads", b.heads.to_string());
        kv.insert("backbone.k", b.k_neighbors.to_string());
        kv.insert("backbone.mlp_ratio", b.mlp_ratio.to_string());
        kv.insert("backbone.dropout", fmt_f64(b.dropout));
        kv.insert("backbone.stream_mode", b.stream_mode.to_string());
        kv.insert("data.frames", b.frames.to_string());
        kv.insert("data.joints", b.joints.to_string());
        kv.insert("pde.enabled", b.pde.enabled.to_string());
        kv.insert("pde.h", fmt_f64(b.pde.step_size));
        kv.insert("pde.steps", b.pde.steps.to_string());
        kv.insert("diffusion.T", self.diffusion_t.to_string());
        kv.insert(
            "diffusion.schedule",
            match self.schedule {
                ScheduleKind::Linear => "linear".into(),
                ScheduleKind::Cosine => "cosine".into(),
            },
        );
        kv.insert("diffusion.steps", self.sampling_steps.to_string());
        kv.insert(
            "diffusion.coeff_mode",
            match self.coeff_mode {
                CoeffMode::Standard => "standard".into(),
                CoeffMode::PaperLiteral => "paper_literal".into(),
            },
        );
        kv.insert("optim.lr", fmt_f64(self.lr));
        kv.insert("optim.lr_decay", fmt_f64(self.lr_decay));
        kv.insert("optim.weight_decay", fmt_f64(self.weight_decay));
        kv.insert("train.epochs", self.epochs.to_string());
        kv.insert("train.batch_size", self.batch_size.to_string());
        kv.insert("train.hflip_prob", fmt_f64(self.hflip_prob));
        kv.insert("seed", self.seed.to_string());
        kv.insert("data.train_sequences", self.train_sequences.to_string());
        kv.insert("data.test_sequences", self.test_sequences.to_string());
        kv.insert("data.amplitude", fmt_f64(self.amplitude));
        kv.insert("data.pose_scale_mm", fmt_f64(self.pose_scale_mm));
        kv.insert("precision", self.precision.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses `key = value` lines (`#` starts a comment) on top of the
    /// defaults. Unknown keys and malformed values are config errors.
    pub fn from_kv(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines onto the current config without final
    /// validation (the CLI layers file < flags, then validates).
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", lineno + 1)));
            };
            self.set_key(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, e)))?;
        }
        Ok(())
    }

    /// Sets one configuration key from its textual value.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn int(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("expected an integer, got '{}'", v)))
        }
        fn float(v: &str) -> Result<f64> {
            let f: f64 = v.parse().map_err(|_| Error::Config(format!("expected a number, got '{}'", v)))?;
            if !f.is_finite() {
                return Err(Error::Config(format!("value '{}' is not finite", v)));
            }
            Ok(f)
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(Error::Config(format!("expected a boolean, got '{}'", other))),
            }
        }
        match key {
            "backbone.d" => self.backbone.d = int(value)?,
            "backbone.d_prime" => self.backbone.d_prime = int(value)?,
            "backbone.depth" => self.backbone.depth = int(value)?,
            "backbone.heads" => self.backbone.heads = int(value)?,
            "backbone.k" => self.backbone.k_neighbors = int(value)?,
            "backbone.mlp_ratio" => self.backbone.mlp_ratio = int(value)?,
            "backbone.dropout" => self.backbone.dropout = float(value)?,
            "backbone.stream_mode" => self.backbone.stream_mode = value.parse()?,
            "data.frames" => self.backbone.frames = int(value)?,
            "data.joints" => self.backbone.joints = int(value)?,
            "pde.enabled" => self.backbone.pde.enabled = boolean(value)?,
            "pde.h" => self.backbone.pde.step_size = float(value)?,
            "pde.steps" => self.backbone.pde.steps = int(value)?,
            "diffusion.T" => self.diffusion_t = int(value)?,
            "diffusion.schedule" => self.schedule = value.parse()?,
            "diffusion.steps" => self.sampling_steps = int(value)?,
            "diffusion.coeff_mode" => self.coeff_mode = value.parse()?,
            "optim.lr" => self.lr = float(value)?,
            "optim.lr_decay" => self.lr_decay = float(value)?,
            "optim.weight_decay" => self.weight_decay = float(value)?,
            "train.epochs" => self.epochs = int(value)?,
            "train.batch_size" => self.batch_size = int(value)?,
            "train.hflip_prob" => self.hflip_prob = float(value)?,
            "seed" => {
                self.seed = value.parse().map_err(|_| Error::Config(format!("expected a seed, got '{}'", value)))?
            }
            "data.train_sequences" => self.train_sequences = int(value)?,
            "data.test_sequences" => self.test_sequences = int(value)?,
            "data.amplitude" => self.amplitude = float(value)?,
            "data.pose_scale_mm" => self.pose_scale_mm = float(value)?,
            "precision" => self.precision = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back exactly
    let s = format!("{}", v);
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{:e}", v)
    }
}
