//! Momentum SGD with weight decay and step-wise learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub decay_every: usize,
    pub decay_factor: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_every: 2000,
            decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed: it makes a step a no-op, which tests rely on.
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("learning rate must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(Error::config(
                "weight decay must be >= 0, decay_every >= 1, decay_factor > 0",
            ));
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn effective_lr(&self, step: usize) -> f32 {
        let k = (step / self.decay_every) as i32;
        (self.learning_rate as f64 * (self.decay_factor as f64).powi(k)) as f32
    }
}

/// Optimizer state; velocities follow the order in which parameter sets
/// are passed to [`Sgd::step`], which must be the same on every call.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: Vec::new(),
        })
    }

    /// Applies one update to every parameter set and zeroes its gradients.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut LayerParams>, step: usize) {
        let lr = self.config.effective_lr(step);
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for (i, p) in params.into_iter().enumerate() {
            if self.velocity.len() <= i {
                self.velocity
                    .push((vec![0.0; p.weights.len()], vec![0.0; p.bias.len()]));
            }
            let (vw, vb) = &mut self.velocity[i];
            update(p.weights.data_mut(), p.grad_weights.data(), vw, lr, mu, wd);
            update(p.bias.data_mut(), p.grad_bias.data(), vb, lr, mu, wd);
            p.zero_grad();
        }
    }
}

fn update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, mu: f32, wd: f32) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let d = g + wd * *w;
        *v = mu * *v + d;
        *w -= lr * *v;
    }
}
