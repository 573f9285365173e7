//! Central finite-difference verification of reverse-mode gradients.
//! Everything to be checked (parameters and probe inputs alike) lives in a
//! float64 [`ParamStore`]; the builder closure reconstructs the graph from
//! scratch for every probe, so any op combination can be verified.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::store::{BoundParams, ParamStore};
use super::tape::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
}

fn eval_scalar(
    store: &ParamStore<f64>,
    build: &impl Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, |_| false);
    let root = build(&mut tape, &params)?;
    tape.value(root).scalar_value()
}

/// Compare reverse-mode gradients of the scalar built by `build` against
/// central finite differences at up to `samples_per_tensor` coordinates of
/// every tensor in `store`. Fails with the offending tensor name and index
/// when the relative error reaches `tol`.
pub fn check_gradients(
    store: &ParamStore<f64>,
    build: impl Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
    seed: u64,
    samples_per_tensor: usize,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, |_| true);
    let root = build(&mut tape, &params)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::shape(
            "gradcheck",
            format!("builder must produce a scalar, found {:?}", tape.value(root).shape()),
        ));
    }
    let grads = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (name, tensor) in store.iter() {
        let var = params.var(name)?;
        let analytic = grads.get(var);
        let n = tensor.numel();
        if n == 0 {
            continue;
        }
        let mut indices: Vec<usize> = (0..n).collect();
        if n > samples_per_tensor {
            indices.shuffle(&mut rng);
            indices.truncate(samples_per_tensor);
            indices.sort_unstable();
        }
        for idx in indices {
            let x = tensor.data()[idx];
            let h = 1e-5 * x.abs().max(1.0);
            let mut probe = store.clone();
            probe.get_mut(name)?.data_mut()[idx] = x + h;
            let up = eval_scalar(&probe, &build)?;
            probe.get_mut(name)?.data_mut()[idx] = x - h;
            let down = eval_scalar(&probe, &build)?;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.map_or(0.0, |g| g.data()[idx]);
            let err = (fd - an).abs();
            let denom = fd.abs().max(an.abs());
            let rel = if denom > 0.0 { err / denom } else { 0.0 };
            if err > tol * denom + 1e-8 {
                return Err(Error::numeric(
                    format!("gradcheck {name}[{idx}]"),
                    format!("analytic {an:.9e} vs finite-difference {fd:.9e} (rel {rel:.3e})"),
                ));
            }
            if denom > 1e-6 {
                worst = worst.max(rel);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        checked,
        worst_rel: worst,
    })
}

/// Fill a store with uniformly random tensors, for gradient-check fixtures.
pub fn random_store(
    seed: u64,
    entries: &[(&str, &[usize])],
    lo: f64,
    hi: f64,
) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n.max(1)).map(|_| rng.random_range(lo..hi)).collect();
        let t = super::tensor::Tensor::from_vec(shape, data).expect("fixture shape");
        store.insert(*name, t).expect("unique fixture names");
    }
    store
}
