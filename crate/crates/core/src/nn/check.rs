//! Central finite-difference gradient verification.

use super::params::{Grads, ParamId, ParamSet, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic parameter gradients against central finite differences
/// of the supplied loss, perturbing every parameter component in turn.
///
/// The model owns its parameters; `params_of` exposes them for perturbation
/// and `loss` re-evaluates the scalar loss on the perturbed model. Relative
/// error is `|a - n| / max(|a|, |n|, floor)` with a small floor so that
/// near-zero gradients compare on an absolute scale.
pub fn gradient_check<S: Scalar, M>(
    model: &mut M,
    params_of: impl Fn(&mut M) -> &mut ParamSet<S>,
    grads: &Grads<S>,
    loss: impl Fn(&M) -> f64,
    step: f64,
) -> GradCheckReport {
    let shapes: Vec<usize> = {
        let params = params_of(model);
        (0..params.len())
            .map(|i| params.tensor(ParamId(i)).len())
            .collect()
    };
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0usize;
    for (idx, &len) in shapes.iter().enumerate() {
        let id = ParamId(idx);
        for k in 0..len {
            let analytic = grads.get(id).map(|t| tensor_get(t, k)).unwrap_or(0.0);
            let orig = tensor_get(params_of(model).tensor(id), k);
            tensor_set(params_of(model).tensor_mut(id), k, orig + step);
            let up = loss(model);
            tensor_set(params_of(model).tensor_mut(id), k, orig - step);
            let down = loss(model);
            tensor_set(params_of(model).tensor_mut(id), k, orig);
            let numeric = (up - down) / (2.0 * step);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
    }
}

fn tensor_get<S: Scalar>(t: &Tensor<S>, k: usize) -> f64 {
    match t {
        Tensor::V(v) => v[k].to_f64_lossy(),
        Tensor::M(m) => {
            let cols = m.ncols();
            m[[k / cols, k % cols]].to_f64_lossy()
        }
    }
}

fn tensor_set<S: Scalar>(t: &mut Tensor<S>, k: usize, x: f64) {
    match t {
        Tensor::V(v) => v[k] = S::from_f64_lossy(x),
        Tensor::M(m) => {
            let cols = m.ncols();
            m[[k / cols, k % cols]] = S::from_f64_lossy(x);
        }
    }
}
