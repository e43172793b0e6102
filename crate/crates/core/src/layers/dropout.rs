use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` in train mode.
#[derive(Debug, Clone)]
pub struct Dropout<T: Scalar = f32> {
    pub rate: f64,
    pub mode: Mode,
    mask: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> Dropout<T> {
    pub const DEFAULT_RATE: f64 = 0.5;

    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self {
            rate,
            mode: Mode::Train,
            mask: Vec::new(),
            shape: Vec::new(),
        })
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, input: &Tensor<T>, rng: &mut R) -> Tensor<T> {
        self.shape = input.shape().to_vec();
        if self.mode == Mode::Eval || self.rate == 0.0 {
            self.mask = vec![T::one(); input.len()];
            return input.clone();
        }
        let scale = T::of(1.0 / (1.0 - self.rate));
        self.mask = (0..input.len())
            .map(|_| if rng.gen::<f64>() >= self.rate { scale } else { T::zero() })
            .collect();
        let data = input.data().iter().zip(&self.mask).map(|(&x, &m)| x * m).collect();
        Tensor::from_vec(input.shape(), data).expect("same shape")
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "dropout upstream gradient {:?} vs {:?}",
                grad_out.shape(),
                self.shape
            )));
        }
        let data = grad_out.data().iter().zip(&self.mask).map(|(&g, &m)| g * m).collect();
        Tensor::from_vec(&self.shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(&[4], vec![1.0f32, -2.0, 3.0, 0.5]).unwrap();
        let mut d = Dropout::new(0.0).unwrap();
        assert_eq!(d.forward(&x, &mut rng), x);
        d.mode = Mode::Eval;
        assert_eq!(d.forward(&x, &mut rng), x);
        let mut d = Dropout::new(0.7).unwrap();
        d.mode = Mode::Eval;
        assert_eq!(d.forward(&x, &mut rng), x);
        assert_eq!(d.backward(&x).unwrap(), x);
        assert!(Dropout::<f32>::new(1.0).is_err());
    }

    #[test]
    fn half_rate_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut d = Dropout::new(0.5).unwrap();
        let x = Tensor::<f32>::new(&[100_000], 1.0).unwrap();
        let y = d.forward(&x, &mut rng);
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() < 0.01, "kept fraction {kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let g = d.backward(&x).unwrap();
        assert_eq!(g, y);
    }
}
