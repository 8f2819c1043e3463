use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One named trainable tensor plus its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

/// Ordered collection of named parameters sharing one Adam step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(ParamEntry {
            name,
            first_moment: Tensor::zeros(value.shape()),
            second_moment: Tensor::zeros(value.shape()),
            value,
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.entries[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec()))
            .collect()
    }

    /// Parameter values only, in store order.
    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Overwrite values (e.g. restoring a checkpoint); shapes must match.
    pub fn set_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (e, v) in self.entries.iter().zip(values) {
            if e.value.shape() != v.shape() {
                return Err(Error::shape("set_values", e.value.shape(), v.shape()));
            }
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v.clone();
        }
        Ok(())
    }

    /// Drop optimizer state, keeping values.
    pub fn reset_optimizer(&mut self) {
        for e in &mut self.entries {
            e.first_moment = Tensor::zeros(e.value.shape());
            e.second_moment = Tensor::zeros(e.value.shape());
        }
        self.step = 0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every entry of `store`.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &Gradients,
    rate: f64,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::contract(format!(
            "gradient set has {} entries, store has {}",
            grads.len(),
            store.len()
        )));
    }
    for (e, g) in store.entries.iter().zip(grads.iter()) {
        if e.value.shape() != g.shape() {
            return Err(Error::shape("adam_step", e.value.shape(), g.shape()));
        }
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::contract(format!(
            "learning rate must be positive, got {rate}"
        )));
    }

    store.step += 1;
    let t = store.step as i32;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = *config;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (e, g) in store.entries.iter_mut().zip(grads.iter()) {
        let p = e.value.data_mut();
        let m = e.first_moment.data_mut();
        let v = e.second_moment.data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Stepped decay: `initial_rate / decay_divisor^floor(epoch / step_epochs)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_rate: f64,
    pub decay_divisor: f64,
    pub step_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_rate: 1e-3,
            decay_divisor: 10.0,
            step_epochs: 600,
        }
    }
}

impl LrSchedule {
    pub fn new(initial_rate: f64, decay_divisor: f64, step_epochs: usize) -> Result<Self> {
        if !(initial_rate > 0.0) || !(decay_divisor > 0.0) || step_epochs == 0 {
            return Err(Error::contract(format!(
                "invalid schedule: rate {initial_rate}, divisor {decay_divisor}, step {step_epochs}"
            )));
        }
        Ok(Self {
            initial_rate,
            decay_divisor,
            step_epochs,
        })
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        self.initial_rate / self.decay_divisor.powi((epoch / self.step_epochs) as i32)
    }
}
