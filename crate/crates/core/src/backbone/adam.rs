use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Multiplier applied to the learning rate once per `decay_period` steps.
    pub decay_factor: f32,
    pub decay_period: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.5,
            decay_period: 25_000,
        }
    }
}

impl AdamConfig {
    /// Constant learning rate, no decay.
    pub fn constant(learning_rate: f32) -> Self {
        AdamConfig {
            learning_rate,
            decay_factor: 1.0,
            decay_period: u64::MAX,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam with a step-wise decayed learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        AdamState { config, m, v, t: 0 }
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Learning rate the next step will apply: `lr * factor^floor(t / period)`.
    pub fn learning_rate(&self) -> f32 {
        let c = &self.config;
        let k = self.t / c.decay_period.max(1);
        (c.learning_rate as f64 * (c.decay_factor as f64).powf(k as f64)) as f32
    }

    /// Zero both moment buffers without touching the step counter.
    pub fn reset_moments(&mut self) {
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|b| b.fill(0.0));
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    /// Apply one update using (and consuming) each parameter's grad slot.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(
                "adam_step",
                format!("state tracks {} parameters, got {}", self.m.len(), params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::contract("adam_step", format!("parameter {i} has no gradient")));
            }
            if p.len() != self.m[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    i.to_string(),
                    format!("parameter has {} values, moments {}", p.len(), self.m[i].len()),
                ));
            }
        }
        let lr = self.learning_rate();
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powf(self.t as f64);
        let bc2 = 1.0 - (c.beta2 as f64).powf(self.t as f64);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.take_grad().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                *w -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + c.eps);
            }
        }
        Ok(())
    }

    /// Store moments as `adam.m.<name>` / `adam.v.<name>` and the step
    /// counter as `adam.t`.
    pub fn write_into(&self, ck: &mut Checkpoint, names: &[String]) {
        for (i, name) in names.iter().enumerate() {
            let n = self.m[i].len();
            ck.insert(format!("adam.m.{name}"), Tensor::new(vec![n], self.m[i].clone()).expect("len"));
            ck.insert(format!("adam.v.{name}"), Tensor::new(vec![n], self.v[i].clone()).expect("len"));
        }
        ck.insert("adam.t", Tensor::scalar(self.t as f32));
    }

    pub fn read_from(ck: &Checkpoint, names: &[String], config: AdamConfig) -> Result<Self> {
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in names {
            m.push(ck.require(&format!("adam.m.{name}"))?.data().to_vec());
            v.push(ck.require(&format!("adam.v.{name}"))?.data().to_vec());
        }
        let t = ck.require("adam.t")?.data()[0] as u64;
        Ok(AdamState { config, m, v, t })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Tensor {
        let mut p = Tensor::scalar(v);
        p.set_grad(vec![g]).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = param(1.5, 0.0);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        st.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 1.5);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25; step = lr * 0.5 / (0.5 + 1e-8)
        let mut p = param(0.0, 0.5);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        st.step(&mut [&mut p]).unwrap();
        let expect = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] as f64 - expect).abs() < 1e-6, "{}", p.data()[0]);
    }

    #[test]
    fn learning_rate_halves_at_decay_period() {
        let mut st = AdamState::new(AdamConfig::default(), [&Tensor::scalar(0.0)]);
        let magnitude = |st: &mut AdamState, t: u64| {
            st.set_step_count(t);
            st.reset_moments();
            let mut p = param(0.0, 0.3);
            st.step(&mut [&mut p]).unwrap();
            p.data()[0].abs()
        };
        let before = magnitude(&mut st, 24_999);
        let after = magnitude(&mut st, 25_000);
        assert!((before / after - 2.0).abs() < 1e-3, "{before} / {after}");
        st.set_step_count(50_000);
        assert!((st.learning_rate() - 0.00025).abs() < 1e-9);
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        assert!(matches!(st.step(&mut [&mut p]), Err(Error::Contract { .. })));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let mut p = param(1.0, 0.2);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        st.step(&mut [&mut p]).unwrap();
        let names = vec!["w".to_string()];
        let mut ck = Checkpoint::new();
        st.write_into(&mut ck, &names);
        let back = AdamState::read_from(&ck, &names, AdamConfig::default()).unwrap();
        assert_eq!(back, st);
    }
}
