//! Mini-batch optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr · ½(1 + cos(π t / T))` over `total_steps`.
    Cosine { total_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Heavy-ball SGD; L2 decay is added to the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<f64>,
    pub step: usize,
}

impl Sgd {
    pub fn new(config: SgdConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: vec![0.0; num_params],
            step: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        match self.config.schedule {
            LrSchedule::Constant => self.config.lr,
            LrSchedule::Cosine { total_steps } => {
                let t = (self.step as f64 / total_steps.max(1) as f64).min(1.0);
                self.config.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// One update of `params` with flat gradient `grad`.
    pub fn step(&mut self, params: &mut ParamSet, grad: &[f64]) -> Result<()> {
        if grad.len() != self.velocity.len() || grad.len() != params.num_scalars() {
            return Err(Error::shape("gradient length does not match the optimizer"));
        }
        let lr = self.current_lr();
        let mut flat = params.flatten();
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((p, v), g) in flat.iter_mut().zip(&mut self.velocity).zip(grad) {
            let d = g + weight_decay * *p;
            *v = momentum * *v + d;
            *p -= lr * *v;
        }
        if lr != 0.0 {
            params.set_flat(&flat)?;
        }
        self.step += 1;
        Ok(())
    }
}
