use serde::{Deserialize, Serialize};

use crate::backbone::{Gradients, ModelHandle};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, momentum: 0.1 }
    }
}

/// SGD with heavy-ball momentum: `v = momentum * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    fingerprint: String,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    /// Registers a model's parameters. Frozen models are refused.
    pub fn new(model: &ModelHandle, config: SgdConfig) -> Result<Self> {
        if !model.is_trainable() {
            return Err(Error::FrozenModel("cannot register frozen parameters with an optimizer".into()));
        }
        if !(config.learning_rate > 0.0) || !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::Config(format!(
                "learning rate must be > 0 and momentum in [0, 1), got {} / {}",
                config.learning_rate, config.momentum
            )));
        }
        Ok(Self {
            config,
            fingerprint: model.architecture().fingerprint(),
            velocity: model.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
        })
    }

    pub fn config(&self) -> SgdConfig {
        self.config
    }

    pub fn step(&mut self, model: &mut ModelHandle, grads: &Gradients) -> Result<()> {
        if !model.is_trainable() {
            return Err(Error::FrozenModel("parameter update attempted on a frozen model".into()));
        }
        if model.architecture().fingerprint() != self.fingerprint || grads.0.len() != self.velocity.len() {
            return Err(Error::IncompatibleArchitecture("optimizer state does not match the model".into()));
        }
        let lr = self.config.learning_rate as f32;
        let mu = self.config.momentum as f32;
        for ((param, vel), grad) in model.params_mut().iter_mut().zip(&mut self.velocity).zip(&grads.0) {
            for ((p, v), g) in param.data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Architecture;

    #[test]
    fn step_refuses_frozen_model() {
        let mut m = ModelHandle::new(Architecture::default(), 0).unwrap();
        let mut sgd = Sgd::new(&m, SgdConfig::default()).unwrap();
        let g = Gradients::zeros_like(&m);
        m.freeze();
        assert!(matches!(sgd.step(&mut m, &g), Err(Error::FrozenModel(_))));
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = ModelHandle::new(Architecture::default(), 0).unwrap();
        let before = m.params()[1].data[0];
        let mut sgd = Sgd::new(&m, SgdConfig { learning_rate: 0.5, momentum: 0.5 }).unwrap();
        let mut g = Gradients::zeros_like(&m);
        g.0[1][0] = 1.0;
        sgd.step(&mut m, &g).unwrap();
        sgd.step(&mut m, &g).unwrap();
        // v1 = 1, v2 = 1.5 -> total displacement 0.5 * 2.5
        assert!((before - m.params()[1].data[0] - 1.25).abs() < 1e-6);
    }
}
