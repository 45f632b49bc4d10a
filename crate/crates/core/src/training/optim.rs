use serde::{Deserialize, Serialize};

use crate::models::ParamSet;
use crate::tensor::Scalar;

/// First and second moment estimates of the adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn for_params<F: Scalar>(params: &ParamSet<F>) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected update from the gradients stored on `params`.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step(params: &mut ParamSet<f32>, state: &mut AdamState, hp: &AdamHyper) {
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
    let step_size = (hp.lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = hp.eps as f32;
    for ((t, m), v) in params.tensors_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = t.grad().map(<[f32]>::to_vec);
        let data = t.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            if update != 0.0 {
                data[i] -= update;
            }
        }
    }
}
