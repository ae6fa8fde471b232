use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        Self::with_betas(store, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = |_: ()| -> Vec<Option<Tensor>> {
            store
                .iter()
                .map(|(_, p)| p.requires_grad.then(|| Tensor::zeros(p.value.shape().to_vec())))
                .collect()
        };
        Self {
            step: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            first: zeros(()),
            second: zeros(()),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.first.get(index).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.second.get(index).and_then(Option::as_ref)
    }
}

/// One Adam update using the gradients stored on `store`.
///
/// Parameters without a gradient are left untouched. Any non-finite
/// gradient aborts the step before anything is modified.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first.len(),
            store.len()
        )));
    }
    for (_, p) in store.iter() {
        if let Some(g) = &p.grad {
            if !g.is_finite() {
                return Err(Error::NanGradient(p.name.clone()));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient of `{}` has the wrong shape", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        if !p.requires_grad {
            continue;
        }
        let Some(g) = &p.grad else { continue };
        let (Some(m), Some(v)) = (state.first[i].as_mut(), state.second[i].as_mut()) else {
            continue;
        };
        let values = p.value.data_mut();
        for (((w, &gi), mi), vi) in values
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
