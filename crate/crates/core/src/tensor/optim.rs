use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Gradient-descent state over one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if let Some(id) = params.ids().find(|&id| params.grad(id).is_none()) {
            return Err(Error::MissingGradient(params.name(id).to_string()));
        }
        if self.first.len() != params.len() {
            self.first = params.ids().map(|id| vec![0.0; params.value(id).len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.entries_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in values.iter_mut().zip(grad.data()) {
                        *w -= c.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, &g), m), v) in values.iter_mut().zip(grad.data()).zip(m).zip(v) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / correction1;
                        let v_hat = *v / correction2;
                        *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
