//! Dataset ingestion, training, evaluation and ablation.
//!
//! The flow is: a manifest lists videos (frame directory, landmark track,
//! reference waveform, split tag); [`ingest`] turns each contiguous
//! detection span into a cached spatiotemporal graph; [`train`] fits the
//! network with AdamW and keeps the checkpoint with the lowest validation
//! loss; [`evaluate`] recovers pulse rates from non-overlapping clip
//! predictions; [`ablate`] repeats train+evaluate over graph variants.

mod ablate;
mod evaluate;
mod ingest;
mod optim;
mod train;

pub use ablate::{ablate, AblationRow, AblationVariant};
pub use evaluate::{
    clip_pulse_rate, evaluate, evaluate_checkpoint, ClipRate, EvalProtocol, EvalReport, VideoRate,
};
pub use ingest::{clip_features, ingest, ClipRef, Dataset, SpanGraph, VideoData};
pub use optim::{adamw_step, AdamWHyper, AdamWState};
pub use train::{train, train_model, TrainReport};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, ModelVariant};
use crate::objective::ObjectiveConfig;
use crate::stgraph::RegionConfig;

/// Network shape as it appears in the config file. Mirrors
/// [`ArchitectureSpec`] with the variant as a tag string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub channels: Vec<usize>,
    pub pool_after: Vec<usize>,
    pub temporal_kernels: [usize; 3],
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub variant: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = ArchitectureSpec::default();
        Self {
            channels: a.channels,
            pool_after: a.pool_after,
            temporal_kernels: a.temporal_kernels,
            bn_eps: a.bn_eps,
            bn_momentum: a.bn_momentum,
            variant: a.variant.tag().to_string(),
        }
    }
}

impl ModelSection {
    pub fn to_arch(&self) -> Result<ArchitectureSpec> {
        let arch = ArchitectureSpec {
            in_channels: 3,
            channels: self.channels.clone(),
            pool_after: self.pool_after.clone(),
            temporal_kernels: self.temporal_kernels,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            variant: ModelVariant::from_tag(&self.variant)?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Node regions and connectivity, stored as the stable region tag
/// (`scheme/feature/edges`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphSection {
    pub region: String,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            region: RegionConfig::default().tag(),
        }
    }
}

impl GraphSection {
    pub fn to_region(&self) -> Result<RegionConfig> {
        let r = RegionConfig::from_tag(&self.region)?;
        r.validate()?;
        Ok(r)
    }
}

/// Everything a training run needs, loadable from a TOML file in which
/// every constant is a named key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Clip length in frames.
    pub window: usize,
    /// Clip stride in frames; equal to `window` means non-overlapping.
    pub stride: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled weight decay: `p <- p * (1 - lr * decay)` before the
    /// moment update.
    pub weight_decay: f64,
    pub adam_epsilon: f64,
    /// Placeholder for input transforms. None are implemented; a
    /// non-empty list is a configuration error.
    pub augmentation: Vec<String>,
    pub model: ModelSection,
    pub graph: GraphSection,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 16,
            window: 256,
            stride: 256,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            adam_epsilon: 1e-8,
            augmentation: Vec::new(),
            model: ModelSection::default(),
            graph: GraphSection::default(),
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is allowed so a run can be frozen for diagnostics.
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        if !self.augmentation.is_empty() {
            return Err(Error::Config(
                "no augmentation transforms are implemented; the list must stay empty".into(),
            ));
        }
        let arch = self.model.to_arch()?;
        let max_kernel = arch.temporal_kernels.iter().copied().max().unwrap_or(1);
        if self.window < max_kernel {
            return Err(Error::Config(format!(
                "window {} is shorter than the largest temporal kernel {max_kernel}",
                self.window
            )));
        }
        self.graph.to_region()?;
        self.objective.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
