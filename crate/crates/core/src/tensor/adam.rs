use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamSet, Real, Result, Tensor, TensorError};

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || (0..params.len()).map(|i| Tensor::zeros(params.at(i).shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, grads: &ParamGrads<T>, state: &mut AdamState<T>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TensorError::GradMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for i in 0..params.len() {
        if grads.at(i).shape() != params.at(i).shape() {
            return Err(TensorError::GradMismatch(format!(
                "`{}`: param {:?} vs grad {:?}",
                params.name(i),
                params.at(i).shape(),
                grads.at(i).shape()
            )));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(cfg.lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(cfg.eps);

    for i in 0..params.len() {
        let g = grads.at(i).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.at_mut(i).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
            p[j] = p[j] - step_size * m[j] / denom;
        }
    }
    Ok(())
}
