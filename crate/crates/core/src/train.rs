//! Optimizer settings and logs shared by the detector and classifier loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::nn::StepSchedule;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: StepSchedule,
    pub weight_decay: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// 60 epochs of RMSProp at 1e-4, divided by ten after epochs 20 and 40.
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            schedule: StepSchedule {
                base_lr: 1e-4,
                drops: vec![20, 40],
                gamma: 0.1,
            },
            weight_decay: 5e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Sample visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::tag::SHUFFLE, epoch as u64]));
    order
}
