//! AdamW with decoupled weight decay. Moments are kept in f64 regardless
//! of the parameter precision so repeated runs are bit-stable and long
//! runs do not drift.

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::model::ParamStore;

use super::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWHyper {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moment per trainable tensor, aligned with the
/// parameter store's tensor order.
#[derive(Debug, Clone)]
pub struct AdamWState {
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamWState {
    pub fn new<F: Real>(params: &ParamStore<F>) -> Self {
        let moments = params
            .tensors()
            .iter()
            .map(|t| {
                t.trainable
                    .then(|| (vec![0.0; t.data.len()], vec![0.0; t.data.len()]))
            })
            .collect();
        Self { step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One update. `grads[i]` pairs with `params.tensors()[i]`; `None` means
/// zero gradient (the tensor still decays and its moments still shrink).
pub fn adamw_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &[Option<Vec<F>>],
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.moments.len() != tensors.len() {
        return Err(Error::Shape(format!(
            "optimizer saw {} gradients and {} moment slots for {} tensors",
            grads.len(),
            state.moments.len(),
            tensors.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hyper.beta1.powi(t);
    let bias2 = 1.0 - hyper.beta2.powi(t);
    for (i, tensor) in tensors.iter_mut().enumerate() {
        let Some((m, v)) = state.moments[i].as_mut() else {
            continue;
        };
        let grad = grads[i].as_deref();
        if let Some(g) = grad {
            if g.len() != tensor.data.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has {} values, expected {}",
                    tensor.name,
                    g.len(),
                    tensor.data.len()
                )));
            }
        }
        for k in 0..tensor.data.len() {
            let g = grad.map_or(0.0, |g| g[k].as_f64());
            let mut p = tensor.data[k].as_f64();
            p *= 1.0 - hyper.lr * hyper.weight_decay;
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g;
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            tensor.data[k] = F::cast(p);
        }
    }
    Ok(())
}
