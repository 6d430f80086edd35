#![allow(dead_code)]

use rand::Rng;

use yolo3a::gradcheck::rel_error;
use yolo3a::layers::{is_trainable, Parameters};
use yolo3a::Tensor;

/// Step for the directional central difference.
pub const DIRECTION_EPS: f64 = 1e-6;

/// Random direction over the trainable tensors of `p`, zero elsewhere.
pub fn direction<P: Parameters>(p: &P, rng: &mut impl Rng) -> Vec<Tensor> {
    let mut dirs = Vec::new();
    p.visit("", &mut |name, t| {
        dirs.push(if is_trainable(name) {
            Tensor::uniform(t.shape(), -1.0, 1.0, rng)
        } else {
            Tensor::zeros_like(t)
        });
    });
    dirs
}

pub fn shifted<P: Parameters + Clone>(p: &P, dirs: &[Tensor], k: f64) -> P {
    let mut out = p.clone();
    let mut i = 0;
    out.visit_mut("", &mut |_, t| {
        t.accumulate(&dirs[i].scale(k)).unwrap();
        i += 1;
    });
    out
}

pub fn along<P: Parameters>(grads: &P, dirs: &[Tensor]) -> f64 {
    let mut acc = 0.0;
    let mut i = 0;
    grads.visit("", &mut |_, t| {
        acc += t.dot(&dirs[i]).unwrap();
        i += 1;
    });
    acc
}

/// Relative error between the analytic directional derivative
/// `Σ grads · v` and the central difference of `loss` along `v`.
pub fn directional_error<P, F>(p: &P, grads: &P, loss: F, rng: &mut impl Rng) -> f64
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let dirs = direction(p, rng);
    let analytic = along(grads, &dirs);
    let e = DIRECTION_EPS;
    let numeric = (loss(&shifted(p, &dirs, e)) - loss(&shifted(p, &dirs, -e))) / (2.0 * e);
    rel_error(analytic, numeric)
}

/// Same check along a random direction in input space.
pub fn input_directional_error<F>(x: &Tensor, dx: &Tensor, loss: F, rng: &mut impl Rng) -> f64
where
    F: Fn(&Tensor) -> f64,
{
    let v = Tensor::uniform(x.shape(), -1.0, 1.0, rng);
    let analytic = dx.dot(&v).unwrap();
    let e = DIRECTION_EPS;
    let plus = x.add(&v.scale(e)).unwrap();
    let minus = x.sub(&v.scale(e)).unwrap();
    rel_error(analytic, (loss(&plus) - loss(&minus)) / (2.0 * e))
}
