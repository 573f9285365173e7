use std::collections::BTreeMap;

use super::store::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state, keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter with a gradient present. Parameters
/// without gradients keep their values but still decay their moments, so
/// freeze/unfreeze schedules stay well defined. Iteration order is the
/// store's sorted order; the whole update is deterministic.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for name in grads.keys() {
        if !params.contains(name) {
            return Err(Error::MissingParam(format!(
                "gradient for unknown parameter {name:?}"
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let bc1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t as i32));

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let zero_grad;
        let grad = match grads.get(&name) {
            Some(g) => {
                if let Some(i) = g.first_non_finite() {
                    return Err(Error::numeric(
                        name.clone(),
                        format!("non-finite gradient at flat index {i}"),
                    ));
                }
                g
            }
            None => {
                zero_grad = Tensor::zeros(params.get(&name)?.shape());
                &zero_grad
            }
        };
        let p = params.get_mut(&name)?;
        if p.shape() != grad.shape() {
            return Err(Error::shape(
                name.clone(),
                format!("gradient {:?} against parameter {:?}", grad.shape(), p.shape()),
            ));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), grad.data());
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (T::one() - b1) * gd[i];
            vd[i] = b2 * vd[i] + (T::one() - b2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
