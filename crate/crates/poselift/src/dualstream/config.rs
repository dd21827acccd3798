use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::PdeConfig;

/// Which streams a fusion block runs. `Parallel` is the full model; the
/// single-stream variants exist for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StreamMode {
    #[default]
    Parallel,
    TransformerOnly,
    GcnOnly,
}

impl std::str::FromStr for StreamMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(StreamMode::Parallel),
            "transformer_only" => Ok(StreamMode::TransformerOnly),
            "gcn_only" => Ok(StreamMode::GcnOnly),
            other => Err(Error::Config(format!("unknown stream mode '{}'", other))),
        }
    }
}

impl std::fmt::Display for StreamMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StreamMode::Parallel => write!(f, "parallel"),
            StreamMode::TransformerOnly => write!(f, "transformer_only"),
            StreamMode::GcnOnly => write!(f, "gcn_only"),
        }
    }
}

/// Hyperparameters of the dual-stream backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Token embedding dimension.
    pub d: usize,
    /// Embedding dimension before the regression head.
    pub d_prime: usize,
    /// Number of dual-stream fusion blocks.
    pub depth: usize,
    /// Attention heads.
    pub heads: usize,
    /// Neighbors in the temporal KNN graph.
    pub k_neighbors: usize,
    /// Hidden width of the transformer-stream feed-forward sublayers, as a
    /// multiple of `d`.
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Frames per sequence.
    pub frames: usize,
    /// Joints per frame.
    pub joints: usize,
    pub pde: PdeConfig,
    pub stream_mode: StreamMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d: 128,
            d_prime: 512,
            depth: 8,
            heads: 8,
            k_neighbors: 3,
            mlp_ratio: 3,
            dropout: 0.1,
            frames: 243,
            joints: 17,
            pde: PdeConfig::default(),
            stream_mode: StreamMode::Parallel,
        }
    }
}

impl BackboneConfig {
    /// Desk-scale defaults used by the synthetic training task.
    pub fn desk() -> Self {
        BackboneConfig { d: 64, depth: 4, heads: 4, frames: 27, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_prime == 0 || self.joints == 0 || self.frames == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.depth < 1 {
            return Err(Error::Config("backbone depth must be at least 1".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} must be divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.k_neighbors == 0 || self.k_neighbors >= self.frames {
            return Err(Error::Config(format!(
                "k = {} must satisfy 1 <= k < frames = {}",
                self.k_neighbors, self.frames
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.pde.validate()
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }
}
