//! Adaptive moment optimizer with decoupled weight decay.
//!
//! Decay multiplies the parameter directly (it never enters the moment
//! estimates), and both moments carry bias correction. Parameters without a
//! gradient entry are treated as having a zero gradient: they still decay.

use std::collections::BTreeMap;

use tinyvid_autodiff::RawTensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} {b} outside [0,1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon {}", self.epsilon)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid(format!("weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Moment state, exposed for checkpointing.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub first_moment: BTreeMap<String, RawTensor>,
    pub second_moment: BTreeMap<String, RawTensor>,
    pub step_count: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimConfig,
    state: OptimState,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Result<AdamW> {
        config.validate()?;
        Ok(AdamW { config, state: OptimState::default() })
    }

    pub fn state(&self) -> &OptimState {
        &self.state
    }

    pub fn restore(config: OptimConfig, state: OptimState) -> Result<AdamW> {
        config.validate()?;
        Ok(AdamW { config, state })
    }

    /// One update over every entry of `params`, in place.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, RawTensor>,
        grads: &BTreeMap<String, RawTensor>,
    ) -> Result<()> {
        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for (name, p) in params.iter_mut() {
            let n = p.len();
            let zero = RawTensor::zeros(p.shape().to_vec());
            let g = grads.get(name).unwrap_or(&zero);
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} vs parameter {:?} for '{name}'",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .state
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| RawTensor::zeros(p.shape().to_vec()));
            let v = self
                .state
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| RawTensor::zeros(p.shape().to_vec()));
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!("stale moments for '{name}'")));
            }

            let mut p_new = Vec::with_capacity(n);
            let mut m_new = Vec::with_capacity(n);
            let mut v_new = Vec::with_capacity(n);
            for i in 0..n {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let pi = p.data()[i];
                let decayed = pi - c.learning_rate * c.weight_decay * pi;
                p_new.push(decayed - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon));
                m_new.push(mi);
                v_new.push(vi);
            }
            *p = RawTensor::new(p.shape().to_vec(), p_new);
            *m = RawTensor::new(m.shape().to_vec(), m_new);
            *v = RawTensor::new(v.shape().to_vec(), v_new);
        }
        Ok(())
    }
}
