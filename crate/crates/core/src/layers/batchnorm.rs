use super::{join, Layer, Mode, Module, Param, ParamKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization over `(n, h, w)`.
///
/// Train mode normalizes with the (biased) batch statistics and folds them
/// into the running buffers as `running = momentum * running + (1 - momentum) * batch`.
/// Eval mode normalizes with the running buffers only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    shape: [usize; 4],
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::new(&[channels], T::one()).expect("channels >= 1"), ParamKind::Scale),
            beta: Param::new(Tensor::zeros(&[channels]), ParamKind::Shift),
            running_mean: Param::new(Tensor::zeros(&[channels]), ParamKind::Running),
            running_var: Param::new(Tensor::new(&[channels], T::one()).expect("channels >= 1"), ParamKind::Running),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
            mode: Mode::Train,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.dims4()?;
        if s.c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm has {} channels, input has {}",
                self.channels(),
                s.c
            )));
        }
        if self.mode == Mode::Train && s.n < 2 {
            return Err(Error::DegenerateBatch(
                "batch normalization in train mode needs at least 2 samples".into(),
            ));
        }
        let plane = s.h * s.w;
        let count = (s.n * plane) as f64;
        let x = input.data();
        let mut x_hat = vec![0.0f64; x.len()];
        let mut inv_std = vec![0.0f64; s.c];
        let mut out = vec![T::zero(); x.len()];
        for c in 0..s.c {
            let idx = |n: usize| (n * s.c + c) * plane;
            let (mean, var) = match self.mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for n in 0..s.n {
                        sum += x[idx(n)..idx(n) + plane].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for n in 0..s.n {
                        sq += x[idx(n)..idx(n) + plane]
                            .iter()
                            .map(|v| (v.f64() - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / count;
                    let rm = &mut self.running_mean.value.data_mut()[c];
                    *rm = T::of(self.momentum * rm.f64() + (1.0 - self.momentum) * mean);
                    let rv = &mut self.running_var.value.data_mut()[c];
                    *rv = T::of(self.momentum * rv.f64() + (1.0 - self.momentum) * var);
                    (mean, var)
                }
                Mode::Eval => (
                    self.running_mean.value.data()[c].f64(),
                    self.running_var.value.data()[c].f64(),
                ),
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = istd;
            let g = self.gamma.value.data()[c].f64();
            let b = self.beta.value.data()[c].f64();
            for n in 0..s.n {
                for i in idx(n)..idx(n) + plane {
                    let xh = (x[i].f64() - mean) * istd;
                    x_hat[i] = xh;
                    out[i] = T::of(g * xh + b);
                }
            }
        }
        self.cache = Some(Cache {
            shape: s.dims(),
            x_hat,
            inv_std,
            mode: self.mode,
        });
        Tensor::from_vec(&s.dims(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("batchnorm backward called before forward".into()))?;
        if grad_out.shape() != cache.shape {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm upstream gradient {:?} vs {:?}",
                grad_out.shape(),
                cache.shape
            )));
        }
        let [n_b, c_n, h, w] = cache.shape;
        let plane = h * w;
        let count = (n_b * plane) as f64;
        let gy = grad_out.data();
        let mut gx = vec![T::zero(); gy.len()];
        for c in 0..c_n {
            let idx = |n: usize| (n * c_n + c) * plane;
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for n in 0..n_b {
                for i in idx(n)..idx(n) + plane {
                    let g = gy[i].f64();
                    sum_g += g;
                    sum_gx += g * cache.x_hat[i];
                }
            }
            self.gamma.grad.data_mut()[c] += T::of(sum_gx);
            self.beta.grad.data_mut()[c] += T::of(sum_g);
            let scale = self.gamma.value.data()[c].f64() * cache.inv_std[c];
            for n in 0..n_b {
                for i in idx(n)..idx(n) + plane {
                    let g = gy[i].f64();
                    gx[i] = T::of(match cache.mode {
                        Mode::Train => scale * (g - sum_g / count - cache.x_hat[i] * sum_gx / count),
                        Mode::Eval => scale * g,
                    });
                }
            }
        }
        Tensor::from_vec(&cache.shape, gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sample_hand_statistics() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = bn.forward(&x).unwrap();
        let s = (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + 1.0 / s).abs() < 1e-12);
        assert!((y.data()[1] - 1.0 / s).abs() < 1e-12);
        // running <- 0.9 * running + 0.1 * batch
        assert!((bn.running_mean.value.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.value.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn train_output_is_standardized() {
        let mut bn = BatchNorm2d::<f32>::new(2);
        let data: Vec<f32> = (0..2 * 2 * 3 * 3).map(|i| ((i * 37 % 11) as f32) * 0.7 - 2.0).collect();
        let y = bn.forward(&Tensor::from_vec(&[2, 2, 3, 3], data).unwrap()).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| y.data()[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut bn = BatchNorm2d::<f32>::new(1);
        bn.gamma.value.fill(0.0);
        bn.beta.value.fill(2.5);
        let y = bn.forward(&Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, -4.0, 9.0, 0.5]).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn single_sample_train_batch_is_rejected() {
        let mut bn = BatchNorm2d::<f32>::new(1);
        assert!(matches!(bn.forward(&Tensor::zeros(&[1, 1, 4, 4])), Err(Error::DegenerateBatch(_))));
        bn.set_mode(Mode::Eval);
        assert!(bn.forward(&Tensor::zeros(&[1, 1, 4, 4])).is_ok());
    }

    #[test]
    fn eval_converges_to_train_on_stationary_batches() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec(&[4, 1, 1, 2], vec![0.5, 1.5, -2.0, 3.0, 0.0, 1.0, 2.0, 4.0]).unwrap();
        let mut train = bn.forward(&x).unwrap();
        for _ in 0..200 {
            train = bn.forward(&x).unwrap();
        }
        bn.set_mode(Mode::Eval);
        let eval = bn.forward(&x).unwrap();
        for (a, b) in train.data().iter().zip(eval.data()) {
            assert!((a - b).abs() < 1e-2);
        }
    }
}
