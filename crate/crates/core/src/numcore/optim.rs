//! AdamW with decoupled weight decay, and a reduce-on-plateau schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{arg_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(arg_err!("learning rate must be positive, got {}", config.lr));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(config.beta1) || !in_unit(config.beta2) {
            return Err(arg_err!("betas must lie in (0, 1)"));
        }
        if !(config.eps > 0.0) || config.weight_decay < 0.0 {
            return Err(arg_err!("eps must be > 0 and weight decay >= 0"));
        }
        Ok(Self {
            config,
            step: 0,
            first: params.zero_grads(),
            second: params.zero_grads(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One AdamW update of every parameter in place.
pub fn adamw_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(dim_err!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first.len()
        ));
    }
    for (i, t) in params.tensors_mut().iter().enumerate() {
        if grads[i].len() != t.len() || state.first[i].len() != t.len() {
            return Err(dim_err!("adamw: buffer {i} does not match its parameter"));
        }
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            *p -= c.lr * c.weight_decay * *p;
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A non-positive bound disables clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Halves the learning rate once the observed loss has failed to improve on
/// its best value for more than `patience` consecutive observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_steps: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize) -> Self {
        Self {
            lr,
            factor: 0.5,
            patience,
            best: f64::INFINITY,
            bad_steps: 0,
            reductions: 0,
        }
    }

    /// Records one observation and returns the (possibly reduced) rate.
    pub fn step(&mut self, observed_loss: f64) -> f64 {
        if observed_loss < self.best {
            self.best = observed_loss;
            self.bad_steps = 0;
        } else {
            self.bad_steps += 1;
            if self.bad_steps > self.patience {
                self.lr *= self.factor;
                self.bad_steps = 0;
                self.reductions += 1;
            }
        }
        self.lr
    }
}

/// Free-function form of [`PlateauScheduler::step`].
pub fn plateau_step(scheduler: &mut PlateauScheduler, observed_loss: f64) -> f64 {
    scheduler.step(observed_loss)
}
