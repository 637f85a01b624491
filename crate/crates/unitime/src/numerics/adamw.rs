//! AdamW with decoupled weight decay.
//!
//! Decay is applied directly to the parameters, never routed through the
//! moment estimates, and moments are bias-corrected by step count.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state for one named parameter set. Parameters are identified by
/// name and must be presented to [`AdamW::step`] in registration order.
pub struct AdamW {
    config: AdamWConfig,
    /// One (first, second) moment pair per parameter, in registration order.
    moments: Vec<(String, Tensor, Tensor)>,
    step: u64,
}

impl AdamW {
    /// Initializes zeroed moments for the given `(name, shape)` pairs.
    pub fn new(config: AdamWConfig, params: &[(String, Vec<usize>)]) -> Self {
        let moments = params
            .iter()
            .map(|(name, shape)| (name.clone(), Tensor::zeros(shape), Tensor::zeros(shape)))
            .collect();
        Self {
            config,
            moments,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn tracked_names(&self) -> impl Iterator<Item = &str> {
        self.moments.iter().map(|(n, _, _)| n.as_str())
    }

    /// One update over all tracked parameters. `entries` must list
    /// `(name, parameter, gradient)` in registration order. A NaN or Inf
    /// anywhere in a gradient rejects the whole step and leaves every
    /// parameter untouched.
    pub fn step(&mut self, entries: &mut [(&str, &mut Tensor, &Tensor)]) -> Result<()> {
        if entries.len() != self.moments.len() {
            return Err(Error::InvalidOperand {
                op: "adamw_step",
                reason: format!(
                    "expected {} parameters, got {}",
                    self.moments.len(),
                    entries.len()
                ),
            });
        }
        // validate everything before mutating anything
        for ((name, m, _), (entry_name, param, grad)) in self.moments.iter().zip(entries.iter()) {
            if name != entry_name {
                return Err(Error::InvalidOperand {
                    op: "adamw_step",
                    reason: format!("expected parameter `{name}`, got `{entry_name}`"),
                });
            }
            if !grad.all_finite() {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
            if param.shape() != m.shape() || grad.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for ((_, m, v), (_, param, grad)) in self.moments.iter_mut().zip(entries.iter_mut()) {
            let p = param.data_mut();
            let g = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..p.len() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g[i];
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
                p[i] -= c.lr * c.weight_decay * p[i];
            }
        }
        Ok(())
    }
}
