//! Central finite-difference helpers for verifying hand-written backward passes.

use rand::Rng;

use super::{Grads, ParamId, ParamStore, Tensor};

/// Step used by every central difference in this module.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

pub fn random_tensor<R: Rng>(shape: [usize; 5], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape/length agree")
}

/// Worst relative error over every input coordinate; panics above `tol`.
pub fn check_input_grad<F>(f: &F, store: &ParamStore<f64>, x: &Tensor<f64>, gx: &Tensor<f64>, tol: f64) -> f64
where
    F: Fn(&ParamStore<f64>, &Tensor<f64>) -> f64,
{
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let numeric = central_difference(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[i] = v;
                f(store, &xp)
            },
            x.data()[i],
        );
        let err = relative_error(gx.data()[i], numeric);
        assert!(
            err < tol,
            "input grad [{i}]: analytic {} numeric {numeric} (rel {err:e})",
            gx.data()[i]
        );
        worst = worst.max(err);
    }
    worst
}

/// Worst relative error over every element of the listed parameters; panics above `tol`.
pub fn check_param_grads<F>(
    f: &F,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    grads: &Grads<f64>,
    ids: &[ParamId],
    tol: f64,
) -> f64
where
    F: Fn(&ParamStore<f64>, &Tensor<f64>) -> f64,
{
    let mut worst = 0.0f64;
    for &id in ids {
        if !store.param(id).trainable {
            continue;
        }
        for i in 0..store.get(id).len() {
            let numeric = central_difference(
                |v| {
                    let mut sp = store.clone();
                    sp.get_mut(id)[i] = v;
                    f(&sp, x)
                },
                store.get(id)[i],
            );
            let err = relative_error(grads.get(id)[i], numeric);
            assert!(
                err < tol,
                "param `{}`[{i}]: analytic {} numeric {numeric} (rel {err:e})",
                store.param(id).name,
                grads.get(id)[i]
            );
            worst = worst.max(err);
        }
    }
    worst
}
