use std::collections::BTreeMap;

use super::tensor::ParamStore;
use crate::error::{DpmnError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn grad_of<'a>(params: &'a ParamStore, name: &str) -> Result<&'a [f64]> {
    params
        .require(name)?
        .grad()
        .ok_or_else(|| DpmnError::contract(format!("trainable parameter `{name}` has no gradient")))
}

/// One bias-corrected Adam update over the named parameters.
pub fn adam_step(
    params: &mut ParamStore,
    trainable: &[String],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    // Check everything first so a missing gradient leaves the store untouched.
    for name in trainable {
        grad_of(params, name)?;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for name in trainable {
        let tensor = params.get_mut(name).expect("checked above");
        let grad = tensor.grad().expect("checked above").to_vec();
        let n = grad.len();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut ParamStore, trainable: &[String], lr: f64) -> Result<()> {
    for name in trainable {
        grad_of(params, name)?;
    }
    for name in trainable {
        let tensor = params.get_mut(name).expect("checked above");
        let grad = tensor.grad().expect("checked above").to_vec();
        tensor
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(w, g)| *w -= lr * g);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam { config: AdamConfig, state: AdamState },
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            config: AdamConfig::with_lr(lr),
            state: AdamState::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, trainable: &[String]) -> Result<()> {
        match self {
            Optimizer::Adam { config, state } => adam_step(params, trainable, state, config),
            Optimizer::Sgd { lr } => sgd_step(params, trainable, *lr),
        }
    }
}
