//! Bias-corrected Adam for the named parameter set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelParameters;
use crate::tensor::{Element, Tensor};

/// Optimizer hyperparameters. The defaults are the training recipe's:
/// constant learning rate 0.001 and epsilon 1e-5, with the conventional
/// moment decays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-5,
        }
    }
}

/// Optimizer state: first/second moments per trainable parameter and the
/// step counter, which advances by exactly one per `step` call.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element> {
    pub config: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> AdamState<T> {
    /// Zero-initialized moments for every trainable parameter.
    pub fn new(params: &ModelParameters<T>, config: AdamConfig) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, entry) in params.iter() {
            if entry.trainable {
                m.insert(name.clone(), vec![T::zero(); entry.tensor.numel()]);
                v.insert(name.clone(), vec![T::zero(); entry.tensor.numel()]);
            }
        }
        AdamState {
            config,
            t: 0,
            m,
            v,
        }
    }

    /// One Adam update over all trainable parameters. Batch-norm running
    /// statistics are not trainable and stay untouched. Gradients must
    /// cover every trainable parameter; a non-finite gradient aborts with
    /// the parameter's name.
    pub fn step(
        &mut self,
        params: &mut ModelParameters<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let names: Vec<String> = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        for name in &names {
            if !grads.contains_key(name) {
                return Err(Error::Usage(format!(
                    "adam step: missing gradient for parameter '{name}'"
                )));
            }
        }

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);

        for name in &names {
            let grad = &grads[name];
            if !grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
            let entry = params.get(name)?;
            let theta = entry.tensor.clone();
            let m = self.m.get_mut(name).expect("moment exists");
            let v = self.v.get_mut(name).expect("moment exists");

            let mut updated = Vec::with_capacity(theta.numel());
            for ((t_i, g_i), (m_i, v_i)) in theta
                .data()
                .iter()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g_i.to_f64c();
                let new_m = c.beta1 * m_i.to_f64c() + (1.0 - c.beta1) * g;
                let new_v = c.beta2 * v_i.to_f64c() + (1.0 - c.beta2) * g * g;
                *m_i = T::from_f64c(new_m);
                *v_i = T::from_f64c(new_v);
                let m_hat = new_m / bc1;
                let v_hat = new_v / bc2;
                let next =
                    t_i.to_f64c() - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                updated.push(T::from_f64c(next));
            }
            params.set_tensor(name, theta.with_data(updated)?)?;
        }
        Ok(())
    }
}
