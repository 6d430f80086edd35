use crate::error::Result;
use crate::tensor::Tensor;

/// Elementwise nonlinearities. Derivatives at kinks are taken as zero,
/// except leaky ReLU which uses its negative slope at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    /// `max(0, min(1, (x + 1) / 2))`
    HardSigmoid,
}

pub const LEAKY: Activation = Activation::LeakyRelu(0.1);

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn hard_sigmoid(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

#[inline]
pub fn hard_sigmoid_grad(v: f64) -> f64 {
    if v > -1.0 && v < 1.0 {
        0.5
    } else {
        0.0
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(slope) => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::HardSigmoid => hard_sigmoid(v),
        }
    }

    /// Derivative evaluated at the pre-activation value `v`.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if v > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
            Activation::HardSigmoid => hard_sigmoid_grad(v),
        }
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// `dy ⊙ f'(x)` where `x` is the pre-activation input.
pub fn activation_backward(kind: Activation, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |v, g| g * kind.derivative(v))
}
