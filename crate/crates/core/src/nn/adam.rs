//! Adam optimizer with named parameter slots.
//!
//! Moment vectors are keyed by tensor name so the optimizer state can be
//! serialized alongside a model and resumed without any positional
//! bookkeeping. A step validates every gradient before touching any
//! parameter, so a diverged batch leaves the model at its last finite state
//! instead of poisoning it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// One parameter tensor paired with its gradient for a step.
pub struct AdamUpdate<'a> {
    pub name: String,
    pub param: &'a mut Vec<f64>,
    pub grad: &'a Vec<f64>,
}

/// First and second moment estimates per tensor, plus the step counter used
/// for bias correction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    slots: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    /// Applies one Adam step to every tensor in `updates`.
    ///
    /// All gradients are shape- and finiteness-checked up front; on failure
    /// no parameter or moment is modified.
    pub fn step(&mut self, config: &AdamConfig, updates: &mut [AdamUpdate]) -> Result<(), NnError> {
        for u in updates.iter() {
            if u.grad.len() != u.param.len() {
                return Err(NnError::GradDim {
                    tensor: u.name.clone(),
                    expected: u.param.len(),
                    got: u.grad.len(),
                });
            }
            if u.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient {
                    tensor: u.name.clone(),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let correction1 = 1.0 - config.beta1.powi(t);
        let correction2 = 1.0 - config.beta2.powi(t);

        for u in updates.iter_mut() {
            let slot = self.slots.entry(u.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; u.param.len()],
                v: vec![0.0; u.param.len()],
            });
            debug_assert_eq!(slot.m.len(), u.param.len());
            for i in 0..u.param.len() {
                let g = u.grad[i];
                slot.m[i] = config.beta1 * slot.m[i] + (1.0 - config.beta1) * g;
                slot.v[i] = config.beta2 * slot.v[i] + (1.0 - config.beta2) * g * g;
                let m_hat = slot.m[i] / correction1;
                let v_hat = slot.v[i] / correction2;
                u.param[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
        Ok(())
    }
}
