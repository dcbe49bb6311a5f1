//! Losses, optimizer and the two-half cycle-consistent training loop.

mod adam;
mod checkpoint;
mod fit;
mod losses;
mod pool;
mod step;

pub use adam::Adam;
pub use checkpoint::{
    list_checkpoints, load_generators, load_state, save_checkpoint, CheckpointInfo, META_FILE, PARAMS_FILE,
};
pub use fit::{fit, read_loss_log, FitOutcome, TrainData, LOSS_LOG_FILE};
pub use losses::{cycle_loss, graph_cycle_loss, graph_lsgan_d, graph_lsgan_g, lsgan_loss};
pub use pool::ImagePool;
pub use step::{
    generator_objective, generator_losses, translate_halves, Batch, GeneratorLosses, Halves, StepInput, TrainState,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::data::Axis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_cyc: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub seed: u64,
    pub use_history_buffer: bool,
    pub history_size: usize,
    /// Reflect-pad by 1/8 of the side, then crop back at a random offset.
    pub random_crop: bool,
    /// Horizontal flips. They do not touch `p`, so keep them off for spatial parametrizations.
    pub random_flip: bool,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            total_iters: 1000,
            seed: 0,
            use_history_buffer: false,
            history_size: 50,
            random_crop: false,
            random_flip: false,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lambda_cyc >= 0.0 && self.lambda_cyc.is_finite()) {
            return fail("lambda_cyc must be a finite value >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.use_history_buffer && self.history_size == 0 {
            return fail("history_size must be >= 1 when the history buffer is on");
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be >= 1");
        }
        Ok(())
    }
}

/// Everything a training run is configured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }
}

/// Scalar losses of one iteration.
///
/// `gan_xy` and `gan_yx` are the least-squares adversarial objectives of D_Y and
/// D_X before their update; `gen_xy` and `gen_yx` are the generator-side terms
/// that were actually minimized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub gan_xy: f64,
    pub gan_yx: f64,
    pub cyc: f64,
    pub total: f64,
    pub gen_xy: f64,
    pub gen_yx: f64,
}

impl LossReport {
    pub fn compose(iteration: u64, gan_xy: f64, gan_yx: f64, cyc: f64, lambda_cyc: f64) -> Self {
        Self { iteration, gan_xy, gan_yx, cyc, total: gan_xy + gan_yx + lambda_cyc * cyc, gen_xy: 0.0, gen_yx: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        [self.gan_xy, self.gan_yx, self.cyc, self.total, self.gen_xy, self.gen_yx].iter().all(|v| v.is_finite())
    }
}

/// Serialized alongside checkpoints so inference can check `p` ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub setup: TrainSetup,
    pub axes: Vec<Axis>,
}
