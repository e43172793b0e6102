use super::{Layer, Module, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Vec<bool>,
    shape: Vec<usize>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Module<T> for Relu {
    fn params<'a>(&'a self, _: &str, _: &mut Vec<(String, &'a Param<T>)>) {}
    fn params_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Param<T>)>) {}
}

impl<T: Scalar> Layer<T> for Relu {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.active = input.data().iter().map(|&v| v > T::zero()).collect();
        self.shape = input.shape().to_vec();
        Ok(input.map(|v| if v > T::zero() { v } else { T::zero() }))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "relu upstream gradient {:?} vs {:?}",
                grad_out.shape(),
                self.shape
            )));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(&self.active)
            .map(|(&g, &a)| if a { g } else { T::zero() })
            .collect();
        Tensor::from_vec(&self.shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_examples() {
        let mut r = Relu::new();
        let y = r.forward(&Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = r.backward(&Tensor::new(&[3], 1.0f32).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);

        let neg = Tensor::from_vec(&[2], vec![-3.0f32, -0.5]).unwrap();
        assert_eq!(r.forward(&neg).unwrap().data(), &[0.0, 0.0]);
        let pos = Tensor::from_vec(&[2], vec![3.0f32, 0.5]).unwrap();
        assert_eq!(r.forward(&pos).unwrap(), pos);
    }
}
