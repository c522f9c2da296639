use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_lr() -> f64 {
    0.1
}
fn default_factor() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    30
}
fn default_true() -> bool {
    true
}

/// Optimizer and loop settings. Defaults follow the CIFAR schedule except
/// for the epoch count and decay epochs, which are desk-scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_factor")]
    pub decay_factor: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Pad-and-crop plus horizontal flips on training images.
    #[serde(default)]
    pub augment: bool,
    /// Fraction of samples held out for `eval_acc`.
    #[serde(default)]
    pub eval_fraction: f64,
    /// Stop once an epoch's training accuracy reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    /// Synthetic data settings used when no data directory is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(
                "learning rate must be finite and non-negative",
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::usage("decay factor must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::usage(
                "momentum must lie in [0, 1) and weight decay be >= 0",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::usage("eval fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Rate for the 0-based `epoch`: one decay per milestone already reached.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

/// One trainable tensor with its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub values: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Whether weight decay applies (not for normalization parameters).
    pub decay: bool,
}

impl ParamState {
    pub fn new(values: Vec<f64>, decay: bool) -> Self {
        let velocity = vec![0.0; values.len()];
        ParamState {
            values,
            velocity,
            decay,
        }
    }
}

/// In-place SGD step: `g += wd * p; v = mu * v + g; p -= lr * (g + mu * v)`
/// with Nesterov, `p -= lr * v` without.
pub fn sgd_step(
    params: &mut [ParamState],
    grads: &[Vec<f64>],
    config: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::structural("one gradient per parameter is required"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.values.len() != g.len() {
            return Err(Error::structural(format!(
                "gradient {i} has the wrong length"
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} at epoch {epoch}"
            )));
        }
    }
    let lr = config.learning_rate_at(epoch);
    let mu = config.momentum;
    for (p, g) in params.iter_mut().zip(grads) {
        let wd = if p.decay { config.weight_decay } else { 0.0 };
        for ((w, v), &gr) in p.values.iter_mut().zip(&mut p.velocity).zip(g) {
            let d = gr + wd * *w;
            *v = mu * *v + d;
            let step = if config.nesterov { d + mu * *v } else { *v };
            *w -= lr * step;
        }
    }
    Ok(())
}
