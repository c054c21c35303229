//! Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::numerics::tensor::Tensor;
use crate::numerics::NumericsError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates plus the step counter, one moment pair
/// per parameter tensor, in the caller's fixed parameter order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        AdamState::new(&sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a flat list of parameter tensors and their
/// gradients (same order and sizes as the state).
///
/// A non-finite gradient aborts the step so training can surface a
/// divergence diagnostic instead of poisoning the parameters.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    lr: f64,
) -> Result<(), NumericsError> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(NumericsError::OptimizerStateMismatch {
            params: params.len(),
            state: state.m.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.m[i].len() || g.len() != p.len() {
            return Err(NumericsError::OptimizerStateMismatch {
                params: p.len(),
                state: state.m[i].len(),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFiniteGradient { param_index: i });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let data = p.data_mut();
        for j in 0..data.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
