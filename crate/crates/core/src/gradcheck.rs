//! Central finite-difference gradient checking.
//!
//! The numerical side never touches the tape: it re-evaluates the loss as a
//! black-box scalar function of a flat input, so it stays an independent
//! oracle for the reverse-mode gradients.

use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Default relative-error bound.
pub const FD_TOL: f64 = 1e-4;

/// Numerical gradient of `f` at `x` via central differences.
pub fn numerical_grad<F: FnMut(&Tensor) -> f64>(x: &Tensor, mut f: F, step: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    grad
}

/// Worst relative error between an analytic gradient and its numerical
/// counterpart, with an absolute floor so near-zero entries do not blow up
/// the ratio.
pub fn max_rel_error(analytic: &Tensor, numerical: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numerical.shape());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numerical.data()) {
        let denom = math::abs(a).max(math::abs(n)).max(1e-6);
        worst = worst.max(math::abs(a - n) / denom);
    }
    worst
}

/// Check one input of a scalar-valued function: `analytic` against central
/// differences of `f` around `x`. Returns the worst relative error.
pub fn check_grad<F: FnMut(&Tensor) -> f64>(x: &Tensor, analytic: &Tensor, f: F, step: f64) -> f64 {
    let num = numerical_grad(x, f, step);
    max_rel_error(analytic, &num)
}

/// Convenience for tests: evaluate a multi-input loss and compare every
/// analytic gradient, returning the worst relative error across inputs.
pub fn check_grads_multi(
    inputs: &[Tensor],
    analytic: &[Tensor],
    mut f: impl FnMut(&[Tensor]) -> f64,
    step: f64,
) -> f64 {
    assert_eq!(inputs.len(), analytic.len());
    let mut worst = 0.0f64;
    for slot in 0..inputs.len() {
        let num = numerical_grad(
            &inputs[slot],
            |perturbed| {
                let mut args: Vec<Tensor> = inputs.to_vec();
                args[slot] = perturbed.clone();
                f(&args)
            },
            step,
        );
        worst = worst.max(max_rel_error(&analytic[slot], &num));
    }
    worst
}
