//! The semi-supervised training loop: supervised cross-entropy plus a
//! weighted consistency term, an optimizer on the student and an EMA
//! teacher.

mod draws;
mod optim;
mod run;
mod step;

pub use draws::{draw_step, BatchSampler, ConsDraws, StepDraws};
pub use optim::{Optimizer, OptimizerKind};
pub use run::{
    config_hash, evaluate, mean_std, run_experiment, DatasetSummary, EvalReport, RunManifest, RunOutput, RunResult, VERSION,
};
pub use step::{consistency_loss, supervised_loss, train_step, Batch, StepReport};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::consistency::{ConsistencyConfig, ConsistencyMode};
use crate::error::{Error, Result};
use crate::segnet::ArchDescriptor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub labelled_batch: usize,
    /// Unlabelled samples per step; pair modes draw twice as many images.
    pub unlabelled_batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub ema_decay: f64,
    pub consistency: ConsistencyConfig,
    pub augment: AugmentConfig,
    /// Apply the geometric augmentation to labelled samples too (image and
    /// class map share the parameters).
    pub augment_labelled: bool,
    pub arch: ArchDescriptor,
    /// Validation every this many steps, plus once at the end.
    pub eval_interval: usize,
    /// Teacher/student checkpoints every this many steps; `None` writes only
    /// the final pair.
    pub checkpoint_interval: Option<usize>,
    /// Write one JSON line of augmentation draws per step.
    pub replay_log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            labelled_batch: 4,
            unlabelled_batch: 4,
            lr: 0.002,
            optimizer: OptimizerKind::default(),
            weight_decay: 0.0,
            seed: 0,
            ema_decay: 0.99,
            consistency: ConsistencyConfig::new(ConsistencyMode::StdAug, 0.0),
            augment: AugmentConfig::default(),
            augment_labelled: true,
            arch: ArchDescriptor::default(),
            eval_interval: 100,
            checkpoint_interval: None,
            replay_log: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("steps", self.steps),
            ("labelled_batch", self.labelled_batch),
            ("unlabelled_batch", self.unlabelled_batch),
            ("eval_interval", self.eval_interval),
        ] {
            if v == 0 {
                return Err(Error::config("train config", format!("{name} must be positive")));
            }
        }
        if self.checkpoint_interval == Some(0) {
            return Err(Error::config("train config", "checkpoint_interval must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train config", format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train config", "weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("train config", format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        self.optimizer.validate()?;
        self.consistency.validate()?;
        self.augment.validate()?;
        self.arch.validate()?;
        Ok(())
    }

    /// Whether the consistency term is computed at all.
    pub fn uses_unlabelled(&self) -> bool {
        self.consistency.gamma > 0.0
    }
}
