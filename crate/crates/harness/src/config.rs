//! One JSON document fully determines a run. Unknown keys are rejected so
//! sweep typos fail loudly; sub-seeds for data, model init, shuffling and
//! adapters derive from the master seed by purpose string.

use serde::{Deserialize, Serialize};

use sta_core::encoder::{EncoderConfig, Placement, TemporalOrder};
use sta_core::error::{Error, Result};
use sta_core::synthvideo::DatasetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub data: DatasetConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub vsm: VsmConfig,
    #[serde(default)]
    pub gradcheck: GradcheckSettings,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Evaluate on the validation split every N steps (0: final step only).
    #[serde(default)]
    pub eval_every: usize,
    /// Write an intermediate checkpoint every N steps (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_stage1")]
    pub stage1: StageConfig,
    #[serde(default = "default_stage2")]
    pub stage2: StageConfig,
    #[serde(default)]
    pub lora: LoraConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

fn default_batch() -> usize {
    32
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_stage1() -> StageConfig {
    StageConfig {
        epochs: 3,
        base_lr: 1e-3,
        warmup_steps: 100,
    }
}
fn default_stage2() -> StageConfig {
    StageConfig {
        epochs: 2,
        base_lr: 3e-4,
        warmup_steps: 0,
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, alpha: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VsmConfig {
    #[serde(default = "default_triplets")]
    pub triplets: usize,
    #[serde(default = "default_val_triplets")]
    pub val_triplets: usize,
    #[serde(default = "default_positive_ratio")]
    pub positive_ratio: f64,
    /// Similarity-threshold sweep grid: tau_steps points over [tau_min, tau_max].
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    #[serde(default = "default_tau_max")]
    pub tau_max: f64,
    #[serde(default = "default_tau_steps")]
    pub tau_steps: usize,
}

fn default_triplets() -> usize {
    1000
}
fn default_val_triplets() -> usize {
    500
}
fn default_positive_ratio() -> f64 {
    0.8
}
fn default_tau_min() -> f64 {
    0.0
}
fn default_tau_max() -> f64 {
    1.0
}
fn default_tau_steps() -> usize {
    41
}

impl Default for VsmConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl VsmConfig {
    pub fn tau_grid(&self) -> Vec<f64> {
        if self.tau_steps <= 1 {
            return vec![self.tau_min];
        }
        let step = (self.tau_max - self.tau_min) / (self.tau_steps - 1) as f64;
        (0..self.tau_steps).map(|i| self.tau_min + step * i as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSettings {
    #[serde(default = "default_samples")]
    pub samples_per_group: usize,
    #[serde(default = "default_fd_step")]
    pub step: f64,
    #[serde(default = "default_fd_tolerance")]
    pub tolerance: f64,
}

fn default_samples() -> usize {
    64
}
fn default_fd_step() -> f64 {
    1e-5
}
fn default_fd_tolerance() -> f64 {
    1e-4
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_orders")]
    pub temporal_orders: Vec<TemporalOrder>,
    #[serde(default = "default_scales")]
    pub head_scales: Vec<f64>,
    #[serde(default = "default_placements")]
    pub placements: Vec<Placement>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
}

fn default_orders() -> Vec<TemporalOrder> {
    vec![TemporalOrder::SpatialFirst, TemporalOrder::TemporalFirst]
}
fn default_scales() -> Vec<f64> {
    vec![1.0, 0.5, 0.25]
}
fn default_placements() -> Vec<Placement> {
    vec![Placement::All]
}
fn default_n_seeds() -> usize {
    3
}

impl Default for AblationConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl ExperimentConfig {
    pub fn from_json(raw: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(raw).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&raw).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data.validate()?;
        if self.encoder.frames != self.data.frames
            || self.encoder.height != self.data.height
            || self.encoder.width != self.data.width
        {
            return Err(Error::Config(format!(
                "encoder expects {}x{}x{} clips but the dataset generates {}x{}x{}",
                self.encoder.frames,
                self.encoder.height,
                self.encoder.width,
                self.data.frames,
                self.data.height,
                self.data.width
            )));
        }
        if self.encoder.channels != 3 {
            return Err(Error::Config("generated clips have 3 channels".into()));
        }
        if !(0.0..=1.0).contains(&self.vsm.positive_ratio) {
            return Err(Error::Config(format!(
                "vsm.positive_ratio must be in [0,1], got {}",
                self.vsm.positive_ratio
            )));
        }
        if self.ablation.n_seeds == 0 {
            return Err(Error::Config("ablation.n_seeds must be >= 1".into()));
        }
        for s in &self.ablation.head_scales {
            if ![1.0, 0.5, 0.25].contains(s) {
                return Err(Error::Config(format!("ablation head scale {s} not in {{1.0, 0.5, 0.25}}")));
            }
        }
        Ok(())
    }
}
