//! Run configuration: model, loss weights, progressive phases, paths, seed.
//!
//! Serialized as TOML (sectioned `key = value` text). `desk_preset` is the
//! reference small-scale recipe: a 2-level width-8 model trained in two
//! phases whose patch sizes step 32 -> 64, the same doubling ladder the full
//! recipe uses at 512 -> 768, with step counts scaled to a 200-pair corpus.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfimError};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// Floor of the cosine learning-rate schedule.
pub const DEFAULT_LR_MIN: f64 = 1e-7;
/// Ceiling of the cosine learning-rate schedule.
pub const DEFAULT_LR_MAX: f64 = 2e-4;
/// Validation cadence in optimizer steps.
pub const DEFAULT_VAL_EVERY: u64 = 200;
/// Holdout size carved off the front of the dataset.
pub const DEFAULT_VAL_PAIRS: usize = 20;
/// Global gradient-norm ceiling; `clip = false` disables it.
pub const DEFAULT_GRAD_CLIP: f64 = 0.5;

/// One stage of the progressive schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPhase {
    /// Cosine ceiling for this phase.
    pub lr: f64,
    /// Optimizer steps in this phase. Zero is allowed and runs nothing.
    pub steps: u64,
    /// Square crop size fed to the model.
    pub patch: usize,
    /// Crops accumulated per optimizer step.
    pub batch: usize,
}

impl TrainPhase {
    pub fn new(lr: f64, steps: u64, patch: usize, batch: usize) -> Self {
        TrainPhase { lr, steps, patch, batch }
    }
}

/// Everything a training run needs, loadable from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; every stochastic choice in the run derives from it.
    pub seed: u64,
    /// Cosine floor shared by all phases.
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    /// Steps between validation passes.
    #[serde(default = "default_val_every")]
    pub val_every: u64,
    /// Pairs reserved from the front of the dataset for validation.
    #[serde(default = "default_val_pairs")]
    pub val_pairs: usize,
    /// Apply global-norm gradient clipping at [`DEFAULT_GRAD_CLIP`].
    #[serde(default = "default_true")]
    pub grad_clip: bool,
    /// Upfront memory budget for parameters plus activations, in MiB.
    #[serde(default = "default_memory_mib")]
    pub max_memory_mib: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub phases: Vec<TrainPhase>,
    pub paths: RunPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPaths {
    /// Directory holding `manifest.txt` and the raw tensor pairs.
    pub data: PathBuf,
    /// Output directory for checkpoints and the log.
    pub out: PathBuf,
}

fn default_lr_min() -> f64 {
    DEFAULT_LR_MIN
}
fn default_val_every() -> u64 {
    DEFAULT_VAL_EVERY
}
fn default_val_pairs() -> usize {
    DEFAULT_VAL_PAIRS
}
fn default_true() -> bool {
    true
}
fn default_memory_mib() -> u64 {
    4096
}

impl RunConfig {
    /// Two-level width-8 recipe: ~40k parameters, two phases, CPU-friendly.
    pub fn desk_preset(data: PathBuf, out: PathBuf, seed: u64) -> Self {
        RunConfig {
            seed,
            lr_min: DEFAULT_LR_MIN,
            val_every: DEFAULT_VAL_EVERY,
            val_pairs: DEFAULT_VAL_PAIRS,
            grad_clip: true,
            max_memory_mib: 4096,
            model: ModelConfig::compact(2, 8),
            loss: LossWeights::default(),
            phases: vec![
                TrainPhase::new(DEFAULT_LR_MAX, 400, 32, 2),
                TrainPhase::new(1e-4, 200, 64, 1),
            ],
            paths: RunPaths { data, out },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.phases.is_empty() {
            return Err(SfimError::config("at least one training phase is required"));
        }
        if self.lr_min <= 0.0 {
            return Err(SfimError::config("lr_min must be positive"));
        }
        if self.val_every == 0 {
            return Err(SfimError::config("val_every must be positive"));
        }
        let div = self.model.extent_divisor();
        let mut prev_patch = 0;
        for (i, p) in self.phases.iter().enumerate() {
            if p.lr <= 0.0 {
                return Err(SfimError::config(format!("phase {i}: lr must be positive")));
            }
            if p.lr < self.lr_min {
                return Err(SfimError::config(format!(
                    "phase {i}: lr {} below lr_min {}",
                    p.lr, self.lr_min
                )));
            }
            if p.batch == 0 {
                return Err(SfimError::config(format!("phase {i}: batch must be positive")));
            }
            if p.patch == 0 || p.patch % div != 0 {
                return Err(SfimError::config(format!(
                    "phase {i}: patch {} must be a positive multiple of {div}",
                    p.patch
                )));
            }
            if p.patch < prev_patch {
                return Err(SfimError::config(format!(
                    "phase {i}: patch {} shrinks below previous phase's {prev_patch}",
                    p.patch
                )));
            }
            prev_patch = p.patch;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| SfimError::config(format!("config serialization failed: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| SfimError::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_toml()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SfimError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    /// Rough upper bound on resident bytes: four f64 copies of every
    /// parameter (value, gradient, two optimizer moments) plus tape
    /// activations for the largest phase. The activation model charges each
    /// block a fixed multiple of its level's feature map, which overestimates
    /// small models comfortably and catches accidental full-scale configs.
    pub fn estimate_bytes(&self) -> u64 {
        let param_bytes = 8 * 4 * rough_param_count(&self.model);
        let worst_phase = self
            .phases
            .iter()
            .map(|p| activation_bytes(&self.model, p.patch))
            .max()
            .unwrap_or(0);
        param_bytes + worst_phase
    }

    pub fn check_memory(&self) -> Result<()> {
        let need = self.estimate_bytes();
        let cap = self.max_memory_mib.saturating_mul(1 << 20);
        if need > cap {
            return Err(SfimError::config(format!(
                "estimated memory {need} bytes exceeds the {cap}-byte budget; \
                 shrink the model or patch size, or raise max_memory_mib"
            )));
        }
        Ok(())
    }
}

fn rough_param_count(m: &ModelConfig) -> u64 {
    let mut total: u64 = 0;
    for (i, &c) in m.channels.iter().enumerate() {
        let c = c as u64;
        let blocks = (m.enc_counts[i] + m.dec_counts[i]) as u64;
        // Frequency block: two 1x1 stacks ~ 8c^2 plus depthwise/filters;
        // spatial stack: sdb_depth dense blocks ~ 12c^2 each. Use the max.
        let per_block = 12 * c * c * m.sdb_depth.max(8) as u64 / 8;
        total += blocks * per_block + 64 * c * c;
    }
    total
}

fn activation_bytes(m: &ModelConfig, patch: usize) -> u64 {
    let mut total: u64 = 0;
    for (i, &c) in m.channels.iter().enumerate() {
        let side = (patch >> i).max(1) as u64;
        let map = c as u64 * side * side;
        let blocks = (m.enc_counts[i] + m.dec_counts[i]) as u64;
        // Tape nodes per block, forward plus gradient buffers.
        total += blocks * 60 * map * 8 * 2;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset() -> RunConfig {
        RunConfig::desk_preset(PathBuf::from("data"), PathBuf::from("out"), 7)
    }

    #[test]
    fn desk_preset_is_valid_and_roundtrips_through_toml() {
        let cfg = preset();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn defaults_fill_in_when_keys_are_omitted() {
        let cfg = preset();
        let mut text = cfg.to_toml().unwrap();
        text = text
            .lines()
            .filter(|l| {
                !l.starts_with("lr_min")
                    && !l.starts_with("val_every")
                    && !l.starts_with("grad_clip")
            })
            .collect::<Vec<_>>()
            .join("\n");
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.lr_min, DEFAULT_LR_MIN);
        assert_eq!(back.val_every, DEFAULT_VAL_EVERY);
        assert!(back.grad_clip);
    }

    #[test]
    fn phase_order_and_divisibility_are_enforced() {
        let mut cfg = preset();
        cfg.phases[1].patch = 16;
        assert!(cfg.validate().is_err(), "shrinking patch must fail");

        let mut cfg = preset();
        cfg.phases[0].patch = 33;
        assert!(cfg.validate().is_err(), "indivisible patch must fail");

        let mut cfg = preset();
        cfg.phases[0].lr = 0.0;
        assert!(cfg.validate().is_err(), "zero lr must fail");

        let mut cfg = preset();
        cfg.phases.clear();
        assert!(cfg.validate().is_err(), "empty phases must fail");
    }

    #[test]
    fn memory_guard_rejects_tiny_budgets_and_accepts_the_preset() {
        let cfg = preset();
        cfg.check_memory().unwrap();

        let mut tiny = preset();
        tiny.max_memory_mib = 1;
        assert!(tiny.check_memory().is_err());

        // The full-scale default model must trip a 4 GiB budget at patch 512.
        let mut big = preset();
        big.model = ModelConfig::default();
        big.phases = vec![TrainPhase::new(2e-4, 10, 512, 1)];
        assert!(big.check_memory().is_err());
    }

    #[test]
    fn bad_toml_reports_a_config_error() {
        let err = RunConfig::from_toml("phases = 3").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
