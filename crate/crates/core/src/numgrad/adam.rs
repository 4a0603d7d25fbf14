use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::ParamStore;
use super::tape::GradMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and step counter, one accumulator pair per trainable parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Array> = params
            .trainable()
            .map(|(k, a)| (k.clone(), Array::zeros(a.shape())))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Frozen parameters are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for (name, entry) in params.iter() {
            if !entry.trainable {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != entry.value.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    entry.value.shape()
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for (name, entry) in params.entries_mut() {
            if !entry.trainable {
                continue;
            }
            let g = grads.get(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            let moments = m.data_mut().iter_mut().zip(v.data_mut());
            for ((p, &gi), (mi, vi)) in entry.value.data_mut().iter_mut().zip(g.data()).zip(moments) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
