//! Pipeline and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How backbone features and the similarity tensor are combined before box
/// regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Fusion module: fused projection plus a channel-attention rescale.
    Ffm,
    /// Elementwise sum.
    Sum,
    /// Channel concatenation followed by a 1x1 projection.
    Concat,
}

/// How the target category is specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountingMode {
    /// Exemplar boxes select the category; clusters holding an exemplar are kept.
    Fewshot,
    /// No exemplars; clusters are kept by relative size.
    Zeroshot,
    /// No exemplars; clusters are kept by similarity to a text embedding.
    Prompt,
}

impl std::fmt::Display for CountingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CountingMode::Fewshot => write!(f, "fewshot"),
            CountingMode::Zeroshot => write!(f, "zeroshot"),
            CountingMode::Prompt => write!(f, "prompt"),
        }
    }
}

/// Knobs for the full detect-and-verify pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Working channel count `d` of the detection and verification heads.
    pub channels: usize,
    /// Pooled patch side `s`; candidate features are `s x s x d`.
    pub pool_size: usize,
    /// Peak suppression radius (Chebyshev); 1 keeps the detection rate high.
    pub nms_radius: usize,
    /// Absolute density floor for accepting a peak.
    pub density_threshold: f32,
    /// Cap on the number of clusters considered by the eigengap rule.
    pub max_clusters: usize,
    /// Zero-shot rule: keep clusters at least this fraction of the largest.
    pub zero_shot_ratio: f64,
    /// Prompt rule: keep clusters within this fraction of the best text match.
    pub prompt_ratio: f64,
    /// Cosine hinge margin for verifier training.
    pub margin: f64,
    pub fusion: FusionMode,
    /// When false the similarity tensor is replaced by zeros (ablation).
    pub use_similarity: bool,
    /// When false candidates are clustered on raw pooled features (ablation).
    pub use_projection: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            pool_size: 3,
            nms_radius: 1,
            density_threshold: 5e-3,
            max_clusters: 10,
            zero_shot_ratio: 0.45,
            prompt_ratio: 0.85,
            margin: 0.2,
            fusion: FusionMode::Ffm,
            use_similarity: true,
            use_projection: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.pool_size == 0 || self.max_clusters == 0 {
            return Err(Error::Config("channels, pool_size and max_clusters must be >= 1".into()));
        }
        for (name, v) in [("zero_shot_ratio", self.zero_shot_ratio), ("prompt_ratio", self.prompt_ratio)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if !self.density_threshold.is_finite() || self.density_threshold < 0.0 {
            return Err(Error::Config("density_threshold must be finite and >= 0".into()));
        }
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::Config("margin must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Hyperparameters for one optimization phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

/// Two-phase training setup. Defaults follow the full-scale recipe; every
/// field can be overridden for desk-scale runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    /// Scenes are zero-padded to this canvas before phase-1 batching.
    pub canvas: (usize, usize),
    pub margin: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1: PhaseConfig { learning_rate: 1e-4, weight_decay: 1e-4, batch_size: 8, epochs: 50 },
            phase2: PhaseConfig { learning_rate: 1e-5, weight_decay: 1e-4, batch_size: 64, epochs: 50 },
            canvas: (512, 512),
            margin: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("phase1", &self.phase1), ("phase2", &self.phase2)] {
            if p.learning_rate <= 0.0 || p.weight_decay < 0.0 {
                return Err(Error::Config(format!("{name}: learning_rate must be > 0, weight_decay >= 0")));
            }
            // epochs == 0 is allowed as an explicit no-op (weights unchanged).
            if p.batch_size == 0 {
                return Err(Error::Config(format!("{name}: batch_size must be >= 1")));
            }
        }
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return Err(Error::Config("canvas dimensions must be positive".into()));
        }
        Ok(())
    }
}
