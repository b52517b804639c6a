use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Momentum SGD with L2 weight decay and a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SGDConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(iteration, multiplier)`: from `iteration` on, the rate is multiplied by `multiplier`.
    pub lr_schedule: Vec<(u64, f64)>,
}

impl Default for SGDConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_schedule: vec![(20_000, 0.1)],
        }
    }
}

impl SGDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration`; milestones compound.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(at, _)| iteration >= *at)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

fn update<T: Scalar>(w: &mut Tensor<T>, v: &mut Tensor<T>, g: &Tensor<T>, lr: T, m: T, wd: T) {
    let (w, v, g) = (w.data_mut(), v.data_mut(), g.data());
    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = m * *v - lr * (g + wd * *w);
        *w = *w + *v;
    }
}

/// `v <- momentum * v - lr * (g + wd * w); w <- w + v` for every layer that has a gradient.
///
/// Layers without a gradient (frozen) keep their weights and momentum untouched.
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    config: &SGDConfig,
    iteration: u64,
) -> Result<()> {
    let lr = T::of(config.lr_at(iteration));
    let m = T::of(config.momentum);
    let wd = T::of(config.weight_decay);
    for (id, p, v) in net.params_and_velocity_mut() {
        let Some(g) = grads.get(id) else { continue };
        if g.weight.shape() != p.weight.shape() {
            return Err(Error::shape("gradient does not match parameter shape"));
        }
        update(&mut p.weight, &mut v.weight, &g.weight, lr, m, wd);
        if let (Some(b), Some(vb), Some(gb)) = (p.bias.as_mut(), v.bias.as_mut(), g.bias.as_ref()) {
            update(b, vb, gb, lr, m, wd);
        }
    }
    Ok(())
}
