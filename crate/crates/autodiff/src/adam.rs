use crate::{AutodiffError, ParamVector, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Optimizer state: step count plus first and second moments shaped like the
/// tracked parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: ParamVector,
    pub second: ParamVector,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamVector, config: AdamConfig) -> Self {
        Self {
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
            config,
        }
    }
}

/// One bias-corrected Adam update. Returns the new parameters and state.
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grads: &ParamVector,
) -> Result<(ParamVector, AdamState)> {
    if !params.same_layout(grads) || !params.same_layout(&state.first) || !params.same_layout(&state.second) {
        return Err(AutodiffError::Contract(
            "adam: parameter, gradient and moment layouts differ".into(),
        ));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let step = state.step + 1;
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    let mut next = params.clone();
    let mut first = state.first.clone();
    let mut second = state.second.clone();
    for i in 0..params.len() {
        let g = grads.tensor(i).data();
        let m = first.tensor_mut(i).data_mut();
        for (m, g) in m.iter_mut().zip(g) {
            *m = beta1 * *m + (1.0 - beta1) * g;
        }
        let v = second.tensor_mut(i).data_mut();
        for (v, g) in v.iter_mut().zip(g) {
            *v = beta2 * *v + (1.0 - beta2) * g * g;
        }
        let (m, v) = (first.tensor(i).data(), second.tensor(i).data());
        for ((p, m), v) in next.tensor_mut(i).data_mut().iter_mut().zip(m).zip(v) {
            let mhat = m / c1;
            let vhat = v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok((
        next,
        AdamState {
            step,
            first,
            second,
            config: state.config,
        },
    ))
}
