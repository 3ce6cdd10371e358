use serde::{Deserialize, Serialize};

use super::AutoencoderParams;

/// ADAM moments and hyperparameters for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: AutoencoderParams,
    pub v: AutoencoderParams,
    pub step: u64,
    pub hyper: AdamHyper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamState {
    pub fn new(like: &AutoencoderParams, hyper: AdamHyper) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), step: 0, hyper }
    }
}

/// Bias-corrected ADAM update of `p` in place.
pub fn adam_step(p: &mut AutoencoderParams, grad: &AutoencoderParams, state: &mut AdamState) {
    state.step += 1;
    let AdamHyper { learning_rate, beta1, beta2, epsilon } = state.hyper;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in p
        .slices_mut()
        .into_iter()
        .zip(grad.slices())
        .zip(state.m.slices_mut())
        .zip(state.v.slices_mut())
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
        }
    }
}
