use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiply the learning rate by `gamma` every `step_size` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub step_size: usize,
    pub gamma: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            step_size: 8,
            gamma: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: StepSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: StepSchedule::default(),
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    epoch: usize,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", config.lr)));
        }
        if !(0.0..=1.0).contains(&config.schedule.gamma) {
            return Err(Error::InvalidArgument(format!(
                "scheduler gamma must lie in [0, 1], got {}",
                config.schedule.gamma
            )));
        }
        Ok(Self {
            step: 0,
            epoch: 0,
            lr: config.lr,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Apply one update. A non-finite gradient rejects the whole batch and
    /// leaves both parameters and moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                &[self.m.len()],
                &[params.len(), grads.len()],
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} = {} at optimizer step {}",
                grads[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    /// Mark an epoch boundary and apply the step schedule.
    pub fn end_epoch(&mut self) {
        self.epoch += 1;
        let s = self.config.schedule;
        if s.step_size > 0 && self.epoch.is_multiple_of(s.step_size) {
            self.lr *= s.gamma;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut st = AdamState::new(3, AdamConfig::default()).unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut st = AdamState::new(1, AdamConfig::default()).unwrap();
        let mut p = vec![0.0];
        st.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-9, "{}", p[0]);
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let mut st = AdamState::new(1, AdamConfig::default()).unwrap();
        let mut x = vec![1.0];
        let mut prev = x[0] * x[0];
        for _ in 0..10 {
            let g = 2.0 * x[0];
            st.step(&mut x, &[g]).unwrap();
            let f = x[0] * x[0];
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut st = AdamState::new(2, AdamConfig::default()).unwrap();
        let mut p = vec![1.0, 1.0];
        let err = st.step(&mut p, &[0.1, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("gradient entry 1"));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn step_schedule_decays() {
        let mut st = AdamState::new(1, AdamConfig::default()).unwrap();
        for _ in 0..8 {
            st.end_epoch();
        }
        assert!((st.lr() - 2e-4).abs() < 1e-15);
        for _ in 0..8 {
            st.end_epoch();
        }
        assert!((st.lr() - 4e-5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = AdamConfig::default();
        c.lr = 0.0;
        assert!(AdamState::new(1, c).is_err());
        let mut c = AdamConfig::default();
        c.schedule.gamma = 1.5;
        assert!(AdamState::new(1, c).is_err());
    }
}
