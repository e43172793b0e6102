use super::{Layer, Module, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Non-overlapping 2x2 max pooling.
///
/// Backward sends each upstream gradient to the first row-major maximum of its window.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    argmax: Vec<usize>,
    in_shape: Option<Shape4>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_shape(input: Shape4) -> Result<Shape4> {
        if input.h % 2 != 0 || input.w % 2 != 0 {
            return Err(Error::InvalidShape(format!(
                "2x2 pooling needs even height and width, got {}x{}",
                input.h, input.w
            )));
        }
        Shape4::new(input.n, input.c, input.h / 2, input.w / 2)
    }
}

impl<T: Scalar> Module<T> for MaxPool2x2 {
    fn params<'a>(&'a self, _: &str, _: &mut Vec<(String, &'a Param<T>)>) {}
    fn params_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Param<T>)>) {}
}

impl<T: Scalar> Layer<T> for MaxPool2x2 {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.dims4()?;
        let o = Self::output_shape(s)?;
        let x = input.data();
        let mut out = Vec::with_capacity(o.numel());
        self.argmax.clear();
        self.argmax.reserve(o.numel());
        for plane in 0..s.n * s.c {
            let base = plane * s.h * s.w;
            for y in 0..o.h {
                for xx in 0..o.w {
                    let mut best = base + 2 * y * s.w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * s.w + 2 * xx + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    self.argmax.push(best);
                }
            }
        }
        self.in_shape = Some(s);
        Tensor::from_vec(&o.dims(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self
            .in_shape
            .ok_or_else(|| Error::Config("pool backward called before forward".into()))?;
        if grad_out.len() != self.argmax.len() {
            return Err(Error::ShapeMismatch(format!(
                "pool upstream gradient has {} elements, expected {}",
                grad_out.len(),
                self.argmax.len()
            )));
        }
        let mut gx = vec![T::zero(); s.numel()];
        for (&i, &g) in self.argmax.iter().zip(grad_out.data()) {
            gx[i] += g;
        }
        Tensor::from_vec(&s.dims(), gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_shape_and_constant_input() {
        let s = MaxPool2x2::output_shape(Shape4::new(1, 32, 160, 64).unwrap()).unwrap();
        assert_eq!(s.chw(), (32, 80, 32));
        let mut p = MaxPool2x2::new();
        let y = p.forward(&Tensor::<f32>::new(&[1, 2, 4, 4], 1.5).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn window_max_and_routing() {
        let mut p = MaxPool2x2::new();
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap().data(), &[3.0]);
        let gx = p.backward(&Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_route_to_first_maximum() {
        let mut p = MaxPool2x2::new();
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![0.0, 2.0, 2.0, 2.0]).unwrap();
        p.forward(&x).unwrap();
        let gx = p.backward(&Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap()).unwrap();
        assert_eq!(gx.data(), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        let mut p = MaxPool2x2::new();
        assert!(matches!(
            Layer::<f32>::forward(&mut p, &Tensor::zeros(&[1, 1, 3, 4])),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn gradient_mass_is_conserved() {
        let mut p = MaxPool2x2::new();
        let x: Vec<f64> = (0..2 * 3 * 4 * 6).map(|i| ((i * 7919) % 97) as f64).collect();
        p.forward(&Tensor::from_vec(&[2, 3, 4, 6], x).unwrap()).unwrap();
        let g: Vec<f64> = (0..2 * 3 * 2 * 3).map(|i| (i as f64 - 10.0) * 0.37).collect();
        let total: f64 = g.iter().sum();
        let gx = p.backward(&Tensor::from_vec(&[2, 3, 2, 3], g).unwrap()).unwrap();
        assert!((gx.sum_f64() - total).abs() < 1e-12);
    }
}
