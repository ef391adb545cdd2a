//! Central finite-difference verification of reverse-mode gradients.
//!
//! Always runs in f64. The acceptance rule: components with |analytic| above
//! the switch threshold must agree to a relative tolerance; smaller ones to
//! an absolute tolerance.

use crate::error::{Error, Result};

use super::graph::{reverse_gradient, Graph, Var};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
const SWITCH: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    pub components: usize,
}

type ScalarFn<'a> = &'a dyn Fn(&Graph<f64>, &[Var<f64>]) -> Var<f64>;

fn eval(f: ScalarFn, inputs: &[Tensor<f64>]) -> f64 {
    let g = Graph::no_grad();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars);
    assert_eq!(out.numel(), 1, "finite differences need a scalar function");
    out.item()
}

/// Central-difference gradients of a scalar function, all components.
pub fn fd_gradients(f: ScalarFn, inputs: &[Tensor<f64>], step: f64) -> Vec<Tensor<f64>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let n = inputs[ti].numel();
        let mut g = vec![0.0f64; n];
        for j in 0..n {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + step;
            let plus = eval(f, &work);
            work[ti].data_mut()[j] = orig - step;
            let minus = eval(f, &work);
            work[ti].data_mut()[j] = orig;
            g[j] = (plus - minus) / (2.0 * step);
        }
        grads.push(Tensor::raw(inputs[ti].shape().to_vec(), g));
    }
    grads
}

/// Compare reverse-mode gradients against central differences at the spec
/// tolerances. Errs with a description of the worst component on failure.
pub fn check_gradients(f: ScalarFn, inputs: &[Tensor<f64>]) -> Result<GradCheck> {
    check_gradients_with(f, inputs, FD_STEP, REL_TOL, ABS_TOL)
}

/// Like [`check_gradients`], but finite-differences only `samples` evenly
/// spread components per input. Full reverse-mode gradients are still
/// computed; only the expensive numeric probing is subsampled, which keeps
/// deep-model checks affordable.
pub fn check_gradients_sampled(
    f: ScalarFn,
    inputs: &[Tensor<f64>],
    samples: usize,
) -> Result<GradCheck> {
    let analytic = reverse_gradient(|g, vars| f(g, vars), inputs)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheck { max_rel: 0.0, max_abs: 0.0, components: 0 };
    for ti in 0..inputs.len() {
        let n = inputs[ti].numel();
        let count = samples.min(n);
        for s in 0..count {
            // Evenly spaced with a deterministic offset so different tensors
            // probe different relative positions.
            let j = (s * n + n / 2 + ti) / count % n;
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + FD_STEP;
            let plus = eval(f, &work);
            work[ti].data_mut()[j] = orig - FD_STEP;
            let minus = eval(f, &work);
            work[ti].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[ti].data()[j];
            let diff = (a - fd).abs();
            report.components += 1;
            if a.abs() > SWITCH {
                let rel = diff / a.abs();
                report.max_rel = report.max_rel.max(rel);
                if rel >= REL_TOL {
                    return Err(Error::numeric(format!(
                        "gradient check failed: input {ti} component {j}: analytic {a:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
                    )));
                }
            } else {
                report.max_abs = report.max_abs.max(diff);
                if diff >= ABS_TOL {
                    return Err(Error::numeric(format!(
                        "gradient check failed: input {ti} component {j}: analytic {a:.9e} vs fd {fd:.9e} (abs {diff:.3e})"
                    )));
                }
            }
        }
    }
    Ok(report)
}

pub fn check_gradients_with(
    f: ScalarFn,
    inputs: &[Tensor<f64>],
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradCheck> {
    let analytic = reverse_gradient(|g, vars| f(g, vars), inputs)?;
    let numeric = fd_gradients(f, inputs, step);
    let mut report = GradCheck { max_rel: 0.0, max_abs: 0.0, components: 0 };
    for (ti, (an, fd)) in analytic.iter().zip(&numeric).enumerate() {
        for j in 0..an.numel() {
            let a = an.data()[j];
            let n = fd.data()[j];
            let diff = (a - n).abs();
            report.components += 1;
            if a.abs() > SWITCH {
                let rel = diff / a.abs();
                report.max_rel = report.max_rel.max(rel);
                if rel >= rel_tol {
                    return Err(Error::numeric(format!(
                        "gradient check failed: input {ti} component {j}: analytic {a:.9e} vs fd {n:.9e} (rel {rel:.3e})"
                    )));
                }
            } else {
                report.max_abs = report.max_abs.max(diff);
                if diff >= abs_tol {
                    return Err(Error::numeric(format!(
                        "gradient check failed: input {ti} component {j}: analytic {a:.9e} vs fd {n:.9e} (abs {diff:.3e})"
                    )));
                }
            }
        }
    }
    Ok(report)
}
