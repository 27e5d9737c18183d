use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`.
    ///
    /// Every gradient is checked before anything is written, so a non-finite
    /// gradient leaves parameters and optimizer state untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        for p in store.params() {
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.m.is_empty() {
            self.m = store.params().iter().map(|p| vec![S::ZERO; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let bc1 = S::from_f64(1.0 - libm::pow(c.beta1, self.step as f64));
        let bc2 = S::from_f64(1.0 - libm::pow(c.beta2, self.step as f64));
        let lr = S::from_f64(c.lr);
        let eps = S::from_f64(c.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.value_mut(id).data_mut();
            for k in 0..grad.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (S::ONE - b1) * g;
                v[k] = b2 * v[k] + (S::ONE - b2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                value[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment estimates and step count as named tensors, keyed by parameter name.
    pub fn to_entries(&self, store: &ParamStore<S>) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![(String::from("adam.step"), Tensor::scalar(S::from_f64(self.step as f64)))];
        for (i, p) in store.params().iter().enumerate() {
            if let (Some(m), Some(v)) = (self.m.get(i), self.v.get(i)) {
                out.push((
                    alloc::format!("adam.m.{}", p.name),
                    Tensor::new(p.value.shape(), m.clone()).expect("moment shape"),
                ));
                out.push((
                    alloc::format!("adam.v.{}", p.name),
                    Tensor::new(p.value.shape(), v.clone()).expect("moment shape"),
                ));
            }
        }
        out
    }

    /// Restores state written by [`Adam::to_entries`]. Missing moments mean the
    /// optimizer had not stepped yet.
    pub fn load_entries(&mut self, store: &ParamStore<S>, entries: &[(String, Tensor<S>)]) -> Result<()> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        self.step = find("adam.step").map(|t| t.item().to_f64() as u64).unwrap_or(0);
        self.m.clear();
        self.v.clear();
        if self.step == 0 {
            return Ok(());
        }
        for p in store.params() {
            let m = find(&alloc::format!("adam.m.{}", p.name));
            let v = find(&alloc::format!("adam.v.{}", p.name));
            match (m, v) {
                (Some(m), Some(v)) if m.shape() == p.value.shape() && v.shape() == p.value.shape() => {
                    self.m.push(m.data().to_vec());
                    self.v.push(v.data().to_vec());
                }
                _ => return Err(Error::Format(alloc::format!("missing optimizer state for `{}`", p.name))),
            }
        }
        Ok(())
    }
}
