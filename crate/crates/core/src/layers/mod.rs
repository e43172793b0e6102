//! Layers as paired forward/backward kernels.
//!
//! Every layer caches what its backward pass needs during `forward`, and
//! `backward` accumulates parameter gradients into [`Param::grad`] while
//! returning the gradient with respect to the layer input.

mod batchnorm;
mod conv;
mod dropout;
mod linear;
mod loss;
mod pool;
mod relu;

pub use batchnorm::BatchNorm2d;
pub use conv::{conv_output_len, Conv2d};
pub use dropout::Dropout;
pub use linear::Linear;
pub use loss::{softmax_cross_entropy, Reduction, SoftmaxLoss};
pub use pool::MaxPool2x2;
pub use relu::Relu;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Train or eval behaviour for BatchNorm and Dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// What a parameter tensor is, which decides how the optimizer treats it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or fully-connected weights (weight decay applies).
    Weight,
    Bias,
    /// BatchNorm gamma.
    Scale,
    /// BatchNorm beta.
    Shift,
    /// BatchNorm running statistics; persisted but never trained.
    Running,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Running
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self { value, grad, kind }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Something that owns named parameters.
pub trait Module<T: Scalar> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn set_mode(&mut self, _mode: Mode) {}

    fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut("", &mut ps);
        for (_, p) in ps {
            p.zero_grad();
        }
    }

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut ps = Vec::new();
        self.params("", &mut ps);
        ps
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut ps = Vec::new();
        self.params_mut("", &mut ps);
        ps
    }
}

/// A single-input single-output differentiable map.
pub trait Layer<T: Scalar>: Module<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>>;
    /// Gradient with respect to the input of the last `forward`; parameter
    /// gradients are accumulated, not overwritten.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
pub(crate) fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("valid shape")
}
