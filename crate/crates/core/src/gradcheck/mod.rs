//! Central-difference verification of analytic gradients.
//!
//! Fragments are evaluated in `f64` so that a step of `1e-3` measures the
//! derivative rather than rounding noise.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Layer;

pub mod suite;
use crate::tensor::Tensor;

/// A scalar function of a flat coordinate vector with an analytic gradient.
pub trait Differentiable {
    fn num_coords(&self) -> usize;
    fn coord(&self, i: usize) -> f64;
    fn set_coord(&mut self, i: usize, v: f64);
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradient of [`Differentiable::loss`] at the current point.
    fn gradient(&mut self) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates dropped because the function is not smooth within `eps` of them.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub eps: f64,
    /// Minimum number of coordinates compared (all of them if fewer exist).
    pub samples: usize,
    /// Reject coordinates whose one-sided slopes over the four half-steps of
    /// the stencil disagree by more than this relative amount: a ReLU,
    /// pooling or hinge kink lies inside the stencil and the central
    /// difference does not measure the derivative there.
    pub kink_tolerance: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            samples: 100,
            kink_tolerance: None,
        }
    }
}

fn central<D: Differentiable + ?Sized>(f: &mut D, i: usize, eps: f64) -> Result<f64> {
    let x0 = f.coord(i);
    f.set_coord(i, x0 + eps);
    let plus = f.loss()?;
    f.set_coord(i, x0 - eps);
    let minus = f.loss()?;
    f.set_coord(i, x0);
    Ok((plus - minus) / (2.0 * eps))
}

/// `f` at `x_i - eps`, `x_i - eps/2`, `x_i + eps/2` and `x_i + eps`.
fn stencil<D: Differentiable + ?Sized>(f: &mut D, i: usize, eps: f64) -> Result<[f64; 4]> {
    let x0 = f.coord(i);
    let mut v = [0.0; 4];
    for (slot, k) in v.iter_mut().zip([-1.0, -0.5, 0.5, 1.0]) {
        f.set_coord(i, x0 + k * eps);
        *slot = f.loss()?;
    }
    f.set_coord(i, x0);
    Ok(v)
}

/// Compare analytic and central-difference gradients on a random subsample
/// of coordinates and return the worst relative error.
pub fn finite_difference_check<D: Differentiable + ?Sized, R: Rng + ?Sized>(
    f: &mut D,
    opts: CheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport> {
    if !(opts.eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step {} must be > 0", opts.eps)));
    }
    let first = f.loss()?;
    let second = f.loss()?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!(
            "repeated evaluation gave {first} then {second}"
        )));
    }
    let analytic = f.gradient()?;
    let n = f.num_coords();
    if analytic.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries for {n} coordinates",
            analytic.len()
        )));
    }
    // Visit every coordinate in random order until enough smooth ones were compared.
    let order = sample(rng, n, n).into_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for i in order {
        if report.checked >= opts.samples {
            break;
        }
        let numeric = match opts.kink_tolerance {
            None => central(f, i, opts.eps)?,
            Some(tol) => {
                let v = stencil(f, i, opts.eps)?;
                let h = opts.eps / 2.0;
                let slopes = [(v[1] - v[0]) / h, (first - v[1]) / h, (v[2] - first) / h, (v[3] - v[2]) / h];
                if slopes.windows(2).any(|p| relative_error(p[0], p[1]) > tol) {
                    report.skipped += 1;
                    continue;
                }
                (v[3] - v[0]) / (2.0 * opts.eps)
            }
        };
        report.checked += 1;
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((i, analytic[i], numeric));
        }
    }
    if report.checked < opts.samples.min(n) / 2 {
        return Err(Error::Determinism(format!(
            "only {} of {} coordinates were smooth enough to check",
            report.checked,
            report.checked + report.skipped
        )));
    }
    Ok(report)
}

/// Probe a [`Layer`]: coordinates are the input entries followed by every
/// trainable parameter entry; the loss is a fixed random projection of the output.
pub struct LayerProbe<L: Layer<f64>> {
    pub layer: L,
    pub input: Tensor<f64>,
    projection: Option<Tensor<f64>>,
    seed: u64,
    /// Scale applied to the returned analytic gradient (1.0 = faithful);
    /// anything else simulates a broken backward pass.
    pub corrupt: f64,
}

impl<L: Layer<f64>> LayerProbe<L> {
    pub fn new(layer: L, input: Tensor<f64>, seed: u64) -> Self {
        Self {
            layer,
            input,
            projection: None,
            seed,
            corrupt: 1.0,
        }
    }

    fn projection_for(&mut self, shape: &[usize]) -> Tensor<f64> {
        if self.projection.as_ref().map(|p| p.shape() != shape).unwrap_or(true) {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(self.seed);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            self.projection = Some(Tensor::from_vec(shape, data).expect("valid shape"));
        }
        self.projection.clone().expect("set above")
    }

    fn locate(&mut self, mut i: usize) -> (Option<usize>, usize) {
        if i < self.input.len() {
            return (None, i);
        }
        i -= self.input.len();
        for (k, (_, p)) in self.layer.named_params().into_iter().enumerate() {
            if !p.kind.trainable() {
                continue;
            }
            if i < p.value.len() {
                return (Some(k), i);
            }
            i -= p.value.len();
        }
        panic!("coordinate out of range")
    }
}

impl<L: Layer<f64>> Differentiable for LayerProbe<L> {
    fn num_coords(&self) -> usize {
        self.input.len()
            + self
                .layer
                .named_params()
                .iter()
                .filter(|(_, p)| p.kind.trainable())
                .map(|(_, p)| p.value.len())
                .sum::<usize>()
    }

    fn coord(&self, i: usize) -> f64 {
        if i < self.input.len() {
            return self.input.data()[i];
        }
        let mut j = i - self.input.len();
        for (_, p) in self.layer.named_params() {
            if !p.kind.trainable() {
                continue;
            }
            if j < p.value.len() {
                return p.value.data()[j];
            }
            j -= p.value.len();
        }
        panic!("coordinate out of range")
    }

    fn set_coord(&mut self, i: usize, v: f64) {
        match self.locate(i) {
            (None, j) => self.input.data_mut()[j] = v,
            (Some(k), j) => {
                let mut ps = self.layer.named_params_mut();
                ps[k].1.value.data_mut()[j] = v;
            }
        }
    }

    fn loss(&mut self) -> Result<f64> {
        let out = self.layer.forward(&self.input)?;
        let proj = self.projection_for(out.shape());
        Ok(out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        let out = self.layer.forward(&self.input)?;
        let proj = self.projection_for(out.shape());
        self.layer.zero_grad();
        let gx = self.layer.backward(&proj)?;
        let mut g = gx.into_data();
        for (_, p) in self.layer.named_params() {
            if p.kind.trainable() {
                g.extend_from_slice(p.grad.data());
            }
        }
        g.iter_mut().for_each(|v| *v *= self.corrupt);
        Ok(g)
    }
}

/// Probe a plain function with a hand-written gradient.
pub struct FnProbe<F, G> {
    pub x: Vec<f64>,
    pub f: F,
    pub grad: G,
}

impl<F, G> Differentiable for FnProbe<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    fn num_coords(&self) -> usize {
        self.x.len()
    }

    fn coord(&self, i: usize) -> f64 {
        self.x[i]
    }

    fn set_coord(&mut self, i: usize, v: f64) {
        self.x[i] = v;
    }

    fn loss(&mut self) -> Result<f64> {
        Ok((self.f)(&self.x))
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        Ok((self.grad)(&self.x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNorm2d, Conv2d, Linear, MaxPool2x2, Mode, Module, Relu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check<L: Layer<f64>>(layer: L, input: Tensor<f64>) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut probe = LayerProbe::new(layer, input, 5);
        finite_difference_check(&mut probe, CheckOptions::default(), &mut rng).unwrap()
    }

    #[test]
    fn linear_layer_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::<f64>::new(12, 9, &mut rng);
        let r = check(l, random(&[4, 12], &mut rng));
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert!(r.checked >= 100);
    }

    #[test]
    fn dilated_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Conv2d::<f64>::new(2, 3, 3, 3, 3, &mut rng);
        let r = check(c, random(&[2, 2, 7, 6], &mut rng));
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn batchnorm_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.value = random(&[3], &mut rng);
        bn.beta.value = random(&[3], &mut rng);
        let r = check(bn.clone(), random(&[3, 3, 4, 3], &mut rng));
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        bn.running_var.value.fill(0.7);
        bn.set_mode(Mode::Eval);
        let r = check(bn, random(&[3, 3, 4, 3], &mut rng));
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn relu_and_pool_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // entries separated by much more than eps
        let mut vals: Vec<f64> = (0..120).map(|i| (i as f64 - 59.5) * 0.05).collect();
        for i in (1..vals.len()).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::from_vec(&[2, 3, 4, 5], vals).unwrap();
        assert!(check(Relu::new(), x.clone()).max_rel_error < 1e-6);
        let x = x.reshape(&[2, 3, 4, 5]).unwrap();
        let x = Tensor::from_vec(&[1, 2, 6, 10], x.into_data()).unwrap();
        assert!(check(MaxPool2x2::new(), x).max_rel_error < 1e-6);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::<f64>::new(6, 5, &mut rng);
        let mut probe = LayerProbe::new(l, random(&[3, 6], &mut rng), 5);
        probe.corrupt = 1.5;
        let r = finite_difference_check(&mut probe, CheckOptions::default(), &mut rng).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut calls = 0u32;
        let mut probe = FnProbe {
            x: vec![1.0],
            f: move |x: &[f64]| {
                calls += 1;
                x[0] + calls as f64
            },
            grad: |_: &[f64]| vec![1.0],
        };
        assert!(matches!(
            finite_difference_check(&mut probe, CheckOptions::default(), &mut rng),
            Err(Error::Determinism(_))
        ));
    }
}
