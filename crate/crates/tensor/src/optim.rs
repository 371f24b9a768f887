//! Adam with bias correction. Moment buffers live in an [`OptimizerState`]
//! keyed by parameter name, so updates are order-independent and a fresh
//! state starts every moment at zero.

use crate::param::NamedParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
}

pub struct OptimizerState<T: Scalar = f32> {
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam step to every trainable parameter with a gradient entry.
///
/// Parameters without a gradient keep both their value and their moments
/// untouched. A gradient for an unknown or shape-mismatched parameter is an
/// error: silently dropping one would hide a wiring bug.
pub fn adam_step<T: Scalar>(
    params: &mut NamedParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    for (name, g) in grads {
        let Some(entry) = params.get(name) else {
            return Err(TensorError::InvalidArgument(format!(
                "adam_step: gradient for unknown parameter `{name}`"
            )));
        };
        if entry.tensor.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: entry.tensor.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let t = state.step;
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let one = T::one();
    let eps = T::of_f64(cfg.eps);
    // Bias corrections in f64: beta^t underflows f32 past a few thousand steps.
    let c1 = T::of_f64(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let c2 = T::of_f64(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let lr = T::of_f64(cfg.lr);

    for (name, g) in grads {
        let entry = params.get(name).expect("validated above");
        if !entry.trainable {
            continue;
        }
        let n = entry.tensor.numel();
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        if mom.m.len() != n {
            return Err(TensorError::InvalidArgument(format!(
                "adam_step: moment buffer for `{name}` has {} elements, parameter has {n}",
                mom.m.len()
            )));
        }
        let p = params.tensor_mut(name)?;
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mom.m.iter_mut().zip(mom.v.iter_mut()))
        {
            *mv = b1 * *mv + (one - b1) * *gv;
            *vv = b2 * *vv + (one - b2) * *gv * *gv;
            let mhat = *mv * c1;
            let vhat = *vv * c2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
