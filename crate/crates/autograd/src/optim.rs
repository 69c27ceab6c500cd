use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, one moment pair per parameter of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store
            .iter()
            .map(|p| vec![0.0; p.tensor().elem_count()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update given gradients aligned with the store order.
    pub fn step(&mut self, store: &ParamStore, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "adam: {} grads / {} moments for {} params",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in store.iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let mut data = p.tensor().to_vec();
            if g.len() != data.len() {
                return Err(Error::Shape(format!("adam: gradient size for {}", p.name())));
            }
            for i in 0..data.len() {
                let gi = g[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                data[i] = (data[i] as f64 - update) as f32;
            }
            p.set_data(data)?;
        }
        Ok(())
    }

    /// Moments as archive tensors under `prefix`, plus the step counter.
    pub fn export(&self, store: &ParamStore, prefix: &str) -> (u64, BTreeMap<String, (Vec<usize>, Vec<f32>)>) {
        let mut out = BTreeMap::new();
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            out.insert(format!("{prefix}.m.{}", p.name()), (vec![m.len()], m.clone()));
            out.insert(format!("{prefix}.v.{}", p.name()), (vec![v.len()], v.clone()));
        }
        (self.step, out)
    }

    pub fn import(
        &mut self,
        store: &ParamStore,
        prefix: &str,
        step: u64,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<()> {
        for (i, p) in store.iter().enumerate() {
            for (key, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let name = format!("{prefix}.{key}.{}", p.name());
                let (_, data) = tensors
                    .get(&name)
                    .ok_or_else(|| Error::MissingTensor(name.clone()))?;
                if data.len() != slot.len() {
                    return Err(Error::Shape(format!("{name}: wrong length")));
                }
                slot.copy_from_slice(data);
            }
        }
        self.step = step;
        Ok(())
    }
}
