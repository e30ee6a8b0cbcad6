//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a one-element loss.
pub fn grad_check<F>(f: F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for p in params {
        if !p.all_finite() {
            return Err(Error::NonFinite("grad_check parameter".into()));
        }
    }
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &leaves)?;
    check_finite(tape.value(loss).item()?)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        check_finite(tape.value(loss).item()?)
    };

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + DEFAULT_STEP;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - DEFAULT_STEP;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            worst = worst.max(relative_error(grad[j], numeric));
        }
    }
    Ok(worst)
}

/// Same check against every trainable coordinate of a parameter store.
/// `f` builds the loss from the store on the given tape.
///
/// `max_coords_per_param` bounds the work on large tensors by checking an
/// evenly strided subset of coordinates.
pub fn grad_check_store<F>(store: &mut ParamStore, max_coords_per_param: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    check_finite(tape.value(loss).item()?)?;
    let grads = tape.backward(loss)?;
    let mut scratch = store.clone();
    scratch.zero_grads();
    scratch.accumulate(&tape, &grads);
    let analytic: Vec<Vec<f64>> = scratch.iter().map(|(_, p)| p.grad.clone()).collect();

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        if store.is_param_frozen(id) {
            continue;
        }
        let n = store.value(id).len();
        let stride = n.div_ceil(max_coords_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + DEFAULT_STEP;
            let up = eval_store(store, &f)?;
            store.value_mut(id).data_mut()[j] = orig - DEFAULT_STEP;
            let down = eval_store(store, &f)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            worst = worst.max(relative_error(analytic[id.index()][j], numeric));
        }
    }
    Ok(worst)
}

fn eval_store<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let loss = f(&mut tape, store)?;
    check_finite(tape.value(loss).item()?)
}

fn check_finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("loss evaluated to {x}")))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}
