//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::layers::{is_trainable, Parameters};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor for [`rel_error`]; below it the error is effectively absolute.
pub const REL_FLOOR: f64 = 1e-4;

/// `(f(x + ε e_i) − f(x − ε e_i)) / 2ε` for every cell of `x`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
                index: i,
            });
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest elementwise [`rel_error`].
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every trainable tensor of `p`,
/// in traversal order.
pub fn param_finite_diff<P, F>(p: &P, f: F, eps: f64) -> Result<Vec<(String, Tensor)>>
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let mut shapes = Vec::new();
    p.visit("", &mut |name, t| {
        shapes.push((name.to_string(), t.clone()))
    });
    let mut probe = p.clone();
    let mut out = Vec::new();
    for (j, (name, base)) in shapes.into_iter().enumerate() {
        if !is_trainable(&name) {
            continue;
        }
        let mut grad = Tensor::zeros_like(&base);
        for i in 0..base.numel() {
            let orig = base.data()[i];
            set_element(&mut probe, j, i, orig + eps);
            let fp = f(&probe);
            set_element(&mut probe, j, i, orig - eps);
            let fm = f(&probe);
            set_element(&mut probe, j, i, orig);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    op: "param_finite_diff",
                    index: i,
                });
            }
            grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
        }
        out.push((name, grad));
    }
    Ok(out)
}

fn set_element<P: Parameters>(p: &mut P, tensor: usize, index: usize, value: f64) {
    let mut j = 0;
    p.visit_mut("", &mut |_, t| {
        if j == tensor {
            t.data_mut()[index] = value;
        }
        j += 1;
    });
}

/// Worst relative error per trainable tensor of `analytic` against the
/// output of [`param_finite_diff`].
pub fn compare_params<P: Parameters>(
    analytic: &P,
    numeric: &[(String, Tensor)],
) -> Vec<(String, f64)> {
    let mut grads = Vec::new();
    analytic.visit("", &mut |name, t| {
        if is_trainable(name) {
            grads.push(t.clone());
        }
    });
    assert_eq!(grads.len(), numeric.len(), "parameter structures differ");
    grads
        .iter()
        .zip(numeric)
        .map(|(a, (name, n))| (name.clone(), max_rel_error(a, n)))
        .collect()
}
