//! Run-wide tunables. Defaults reproduce the published training setup; the
//! `desk` preset shrinks network width and data volume so a full
//! leave-one-out run fits on a workstation CPU.

use serde::{Deserialize, Serialize};
use tumorcast_nnet::{InitScheme, TrainConfig};

use crate::growthmodels::ArchitectureConfig;
use crate::motion::FlowParams;
use crate::sampling::SamplingConfig;
use crate::{CoreError, Result};

/// Threshold candidates `start, start + step, ..., stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for TauGrid {
    fn default() -> Self {
        Self {
            start: 0.05,
            stop: 0.95,
            step: 0.05,
        }
    }
}

impl TauGrid {
    /// Grid values computed as `start + k * step` to avoid drift.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|k| ((self.start + k as f64 * self.step) * 1e9).round() / 1e9).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.stop < 1.0 && self.start <= self.stop && self.step > 0.0) {
            return Err(CoreError::InvalidConfig(format!("tau grid {self:?} must satisfy 0 < start <= stop < 1, step > 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Optimizer settings; `max_epochs` is the invasion budget.
    pub train: TrainConfig,
    /// Epoch whose snapshot every non-invasion network uses.
    pub fusion_epochs: usize,
    pub arch: ArchitectureConfig,
    /// Multiplier applied to mean-subtracted patches.
    pub input_scale: f32,
    pub sampling: SamplingConfig,
    /// Growth-zone margin (Nx, Ny, Nz).
    pub zone_margin: [usize; 3],
    pub tau_grid: TauGrid,
    pub flow: FlowParams,
    /// Patches per forward pass during prediction.
    pub predict_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::default(),
            fusion_epochs: 20,
            arch: ArchitectureConfig::default(),
            input_scale: 1.0,
            sampling: SamplingConfig::default(),
            zone_margin: [3, 3, 3],
            tau_grid: TauGrid::default(),
            flow: FlowParams::default(),
            predict_batch: 256,
        }
    }
}

impl RunConfig {
    /// Reduced-scale profile for single-machine leave-one-out runs: narrower
    /// layers, per-interval sample cap, smaller batches, a larger learning
    /// rate, lighter dropout, He initialization and scaled inputs. Epoch
    /// budgets, schedule shape, momentum, weight decay, sampling ratio, zone
    /// margin and threshold grid are unchanged.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig {
                lr0: 0.01,
                batch_size: 32,
                dropout: 0.5,
                ..TrainConfig::default()
            },
            arch: ArchitectureConfig {
                widths: [8, 16, 16, 16],
                fc_units: 32,
                fusion_channels: 16,
                init: InitScheme::Msra,
            },
            input_scale: 1.0 / 128.0,
            sampling: SamplingConfig {
                max_samples_per_pair: Some(300),
                ..SamplingConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.fusion_epochs == 0 {
            return Err(CoreError::InvalidConfig("fusion_epochs must be > 0".into()));
        }
        self.arch.validate()?;
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(CoreError::InvalidConfig("input_scale must be positive".into()));
        }
        self.sampling.validate()?;
        self.tau_grid.validate()?;
        self.flow.validate()?;
        if self.predict_batch == 0 {
            return Err(CoreError::InvalidConfig("predict_batch must be > 0".into()));
        }
        Ok(())
    }
}
