//! Pieces shared by the 2D and 3D trainers.

use crate::error::{Error, Result};
use crate::reduce::pairwise_sum_by;
use crate::volgrid::Volume3D;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerTag {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub lr: f64,
    pub batch_size: usize,
    pub patches_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerTag,
    /// Stop after this many epochs without improvement; 0 disables.
    #[serde(default)]
    pub early_stop_patience: usize,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.patches_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, patches_per_epoch and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch_size)
    }
}

/// Global intensity standardisation learned from the training volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }
}

impl Normalization {
    pub fn fit<'a>(volumes: impl IntoIterator<Item = &'a Volume3D>) -> Result<Self> {
        let data: Vec<f32> = volumes.into_iter().flat_map(|v| v.to_f32()).collect();
        if data.is_empty() {
            return Err(Error::Invalid("no voxels to fit normalization".into()));
        }
        let n = data.len() as f64;
        let mean = pairwise_sum_by(data.len(), &|i| data[i] as f64) / n;
        let var = pairwise_sum_by(data.len(), &|i| (data[i] as f64 - mean).powi(2)) / n;
        Ok(Normalization { mean: mean as f32, std: var.sqrt().max(1e-6) as f32 })
    }

    pub fn apply(&self, v: &Volume3D) -> Vec<f32> {
        v.to_f32().into_iter().map(|x| (x - self.mean) / self.std).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    /// Optional per-epoch validation Dice (3D trainer only).
    #[serde(default)]
    pub val_dice: Vec<f64>,
    pub stopped_early: bool,
}

/// Plateau detector on epoch losses.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStop {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStop {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStop { patience, best: f64::INFINITY, stale: 0 }
    }

    /// Returns true when training should stop.
    pub(crate) fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - 1e-3) {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }
}
