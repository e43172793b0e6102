use rand::Rng;

use super::{he_normal, join, Layer, Module, Param, ParamKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matvec_affine, Tensor};

/// Fully connected layer on `[n, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar = f32> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = he_normal(&[outputs, inputs], inputs, rng);
        Self::from_params(w, Tensor::zeros(&[outputs])).expect("consistent shapes")
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::ShapeMismatch(format!(
                "linear bias {:?} vs {out} outputs",
                bias.shape()
            )));
        }
        Ok(Self {
            weight: Param::new(weight, ParamKind::Weight),
            bias: Param::new(bias, ParamKind::Bias),
            input: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = matvec_affine(&self.weight.value, &self.bias.value, input)?;
        self.input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("linear backward called before forward".into()))?;
        let (n, k) = x.dims2()?;
        let out = self.outputs();
        if grad_out.shape() != [n, out] {
            return Err(Error::ShapeMismatch(format!(
                "linear upstream gradient {:?} vs [{n}, {out}]",
                grad_out.shape()
            )));
        }
        let g = grad_out.data();
        // gw[out, k] += g[n, out]^T * x[n, k]
        T::gemm(out, n, k, T::one(), g, (1, out as isize), x.data(), (k as isize, 1), T::one(), self.weight.grad.data_mut(), (k as isize, 1));
        for r in 0..n {
            for (acc, &v) in self.bias.grad.data_mut().iter_mut().zip(&g[r * out..(r + 1) * out]) {
                *acc += v;
            }
        }
        let mut gx = vec![T::zero(); n * k];
        T::gemm(n, out, k, T::one(), g, (out as isize, 1), self.weight.value.data(), (k as isize, 1), T::zero(), &mut gx, (k as isize, 1));
        Tensor::from_vec(&[n, k], gx)
    }
}
