//! Adam with bias correction and a step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub base_lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &ParamStore, config: AdamConfig, base_lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        OptimizerState {
            config,
            base_lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter, in place.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("optimizer tracks {} tensors, store has {}", state.m.len(), params.len()),
        ));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.grad.is_none() {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if m.shape() != p.value.shape() {
            return Err(Error::shape("adam_step", m.shape(), p.value.shape()));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.as_ref().expect("checked above");
        let (w, g) = (p.value.data_mut(), grad.data());
        for (((wi, &gi), mi), vi) in w.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *wi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `base_lr * decay_factor^floor(iter / decay_every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1.5e-4,
            decay_factor: 0.5,
            decay_every: 3000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("lr decay {} must lie in (0, 1]", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("lr decay interval must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        let k = iter / self.decay_every;
        self.base_lr * self.decay_factor.powi(k.min(i32::MAX as u64) as i32)
    }
}

/// Adam state driven by a schedule indexed by its own step count.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub state: OptimizerState,
    pub schedule: LrSchedule,
}

impl Optimizer {
    pub fn new(params: &ParamStore, config: AdamConfig, schedule: LrSchedule) -> Self {
        Optimizer {
            state: OptimizerState::new(params, config, schedule.base_lr),
            schedule,
        }
    }

    /// Learning rate the next step will use.
    pub fn lr(&self) -> f64 {
        self.schedule.lr_at(self.state.step_count())
    }

    /// Take one step; returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<f64> {
        let lr = self.lr();
        adam_step(params, &mut self.state, lr)?;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1.5e-4);
        assert_eq!(s.lr_at(2999), 1.5e-4);
        assert_eq!(s.lr_at(3000), 7.5e-5);
        assert_eq!(s.lr_at(6000), 3.75e-5);
        let mut prev = f64::INFINITY;
        for it in (0..20_000).step_by(250) {
            assert!(s.lr_at(it) <= prev);
            prev = s.lr_at(it);
        }
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = OptimizerState::new(&s, AdamConfig::default(), 1e-3);
        s.get_mut("w").unwrap().grad = Some(Tensor::zeros(&[2]));
        adam_step(&mut s, &mut st, 1e-3).unwrap();
        assert_eq!(s.get("w").unwrap().value.data(), &[1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.0]);
        let mut st = OptimizerState::new(&s, AdamConfig::default(), 0.1);
        s.get_mut("w").unwrap().grad = Some(Tensor::ones(&[1]));
        adam_step(&mut s, &mut st, 0.1).unwrap();
        let w = s.get("w").unwrap().value.data()[0];
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut s = store(&[0.3, 0.7]);
        let mut st = OptimizerState::new(&s, AdamConfig::default(), 0.0);
        for _ in 0..5 {
            s.get_mut("w").unwrap().grad = Some(Tensor::new(&[2], vec![1.5, -0.2]).unwrap());
            adam_step(&mut s, &mut st, 0.0).unwrap();
        }
        assert_eq!(s.get("w").unwrap().value.data(), &[0.3, 0.7]);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = store(&[1.0]);
        let mut st = OptimizerState::new(&s, AdamConfig::default(), 1e-3);
        let err = adam_step(&mut s, &mut st, 1e-3).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(st.step_count(), 0);
    }
}
