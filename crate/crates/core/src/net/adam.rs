//! Adam with bias correction over the fixed-order tensor lists the
//! parameter containers expose.

use super::tensor::Tensor;
use super::{NetError, TrainConfig};

/// First/second moment estimates, aligned index-for-index with one
/// branch's `tensors()` order.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    names: Vec<&'static str>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(tensors: &[(&'static str, &Tensor)]) -> Self {
        Self {
            step: 0,
            names: tensors.iter().map(|(n, _)| *n).collect(),
            m: tensors.iter().map(|(_, t)| t.zeros_like()).collect(),
            v: tensors.iter().map(|(_, t)| t.zeros_like()).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. `params` and `grads` must list the same tensors in the
/// same order the state was built from.
pub fn adam_step(
    params: &mut [(&'static str, &mut Tensor)],
    grads: &[(&'static str, &Tensor)],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), NetError> {
    if params.len() != state.names.len() || grads.len() != state.names.len() {
        return Err(NetError::ShapeMismatch {
            context: format!(
                "adam expects {} tensors, got {} params / {} grads",
                state.names.len(),
                params.len(),
                grads.len()
            ),
        });
    }
    for i in 0..params.len() {
        let (pn, p) = (&params[i].0, &params[i].1);
        let (gn, g) = (&grads[i].0, &grads[i].1);
        if *pn != state.names[i] || *gn != state.names[i] || p.shape() != state.m[i].shape() || g.shape() != p.shape() {
            return Err(NetError::ShapeMismatch {
                context: format!("adam tensor {i} ({}) does not match state ({})", pn, state.names[i]),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].1.data();
        let w = params[i].1.data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..g.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}
