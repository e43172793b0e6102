//! The named finite-difference checks run by `mscan gradcheck`.
//!
//! Every check evaluates in `f64` with a central step of `1e-3`. Layer,
//! sampler and model checks must agree within `1e-3`; the constraint
//! losses are piecewise quadratic and must agree within `1e-4`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference_check, CheckOptions, Differentiable, FnProbe, GradCheckReport, LayerProbe};
use crate::error::{Error, Result};
use crate::layers::{
    softmax_cross_entropy, BatchNorm2d, Conv2d, Dropout, Layer, Linear, MaxPool2x2, Mode, Module, Reduction, Relu,
};
use crate::model::{FusionNetwork, ModelConfig, ModelMode, ModelProbe};
use crate::mscan::{Mscan, MscanConfig};
use crate::part_losses::{center_loss, inside_loss, localization_loss, scale_range_loss, InsideEdges, LossWeights, PartPrior};
use crate::stn::{bilinear_backward, bilinear_sample, grid_generate, grid_theta_gradient, SamplingGrid, TransformParams};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Layers,
    Stn,
    Losses,
    Model,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Layers, Component::Stn, Component::Losses, Component::Model];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Layers => "layers",
            Component::Stn => "stn",
            Component::Losses => "losses",
            Component::Model => "model",
        })
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck component {s:?} (layers, stn, losses or model)")))
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct SuiteCheck {
    pub component: Component,
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
}

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Scale the analytic gradient of the named check by 1.5, simulating a
    /// broken backward pass. Used to test the failure path.
    pub corrupt: Option<String>,
}

/// Scales the analytic gradient of the wrapped probe.
struct Scaled<'a> {
    inner: &'a mut dyn Differentiable,
    factor: f64,
}

impl Differentiable for Scaled<'_> {
    fn num_coords(&self) -> usize {
        self.inner.num_coords()
    }
    fn coord(&self, i: usize) -> f64 {
        self.inner.coord(i)
    }
    fn set_coord(&mut self, i: usize, v: f64) {
        self.inner.set_coord(i, v)
    }
    fn loss(&mut self) -> Result<f64> {
        self.inner.loss()
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        let mut g = self.inner.gradient()?;
        g.iter_mut().for_each(|v| *v *= self.factor);
        Ok(g)
    }
}

struct Runner<'o> {
    opts: &'o SuiteOptions,
    rng: ChaCha8Rng,
    out: Vec<SuiteCheck>,
}

impl Runner<'_> {
    fn run(
        &mut self,
        component: Component,
        name: &str,
        tolerance: f64,
        check: CheckOptions,
        probe: &mut dyn Differentiable,
        describe: impl Fn(usize) -> String,
    ) -> Result<()> {
        let factor = if self.opts.corrupt.as_deref() == Some(name) { 1.5 } else { 1.0 };
        let mut scaled = Scaled { inner: probe, factor };
        let report = finite_difference_check(&mut scaled, check, &mut self.rng)?;
        let worst = report.worst.map(|(i, _, _)| describe(i)).unwrap_or_default();
        self.out.push(SuiteCheck {
            component,
            name: name.to_string(),
            tolerance,
            report,
            worst,
        });
        Ok(())
    }

    fn layer<L: Layer<f64>>(&mut self, name: &str, layer: L, input: Tensor<f64>, kinks: bool) -> Result<()> {
        let n_in = input.len();
        let names: Vec<(String, usize)> = layer
            .named_params()
            .into_iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(n, p)| (n, p.value.len()))
            .collect();
        let mut probe = LayerProbe::new(layer, input, 5);
        let check = CheckOptions {
            eps: STEP,
            samples: 120,
            kink_tolerance: kinks.then_some(1e-4),
        };
        let describe = |i: usize| locate(i, n_in, &names);
        self.run(Component::Layers, name, TOLERANCE, check, &mut probe, describe)
    }
}

fn locate(mut i: usize, n_in: usize, params: &[(String, usize)]) -> String {
    if i < n_in {
        return format!("input[{i}]");
    }
    i -= n_in;
    for (n, len) in params {
        if i < *len {
            return format!("{n}[{i}]");
        }
        i -= len;
    }
    format!("coordinate {i}")
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Distinct values at least `0.05` apart in random order, so `eps` never
/// crosses a ReLU or max-pool decision.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, vals).expect("valid shape")
}

/// A nearly bilinear `[c, h, w]` pattern: the part crops of the model check
/// then have almost no slope change across pixel cells, and a `1e-3` move
/// of a transform measures the derivative instead of interpolation kinks.
fn smooth_image(c: usize, h: usize, w: usize, phase: f64) -> Tensor<f64> {
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 / h as f64, x as f64 / w as f64);
                let c = ch as f64;
                data.push(0.6 * yf - 0.4 * (1.0 + c) * xf + 0.3 * xf * yf + 0.05 * (2.0 * yf + c + phase).sin());
            }
        }
    }
    Tensor::from_vec(&[c, h, w], data).expect("valid shape")
}

fn layers(r: &mut Runner) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lin = Linear::<f64>::new(12, 9, &mut rng);
    r.layer("linear", lin, uniform(&[4, 12], &mut rng), false)?;
    for d in 1..=3 {
        let conv = Conv2d::<f64>::new(2, 3, 3, d, d, &mut rng);
        r.layer(&format!("conv2d_dilation{d}"), conv, uniform(&[2, 2, 8, 7], &mut rng), false)?;
    }
    let mut bn = BatchNorm2d::<f64>::new(3);
    bn.gamma.value = uniform(&[3], &mut rng);
    bn.beta.value = uniform(&[3], &mut rng);
    r.layer("batchnorm_train", bn.clone(), uniform(&[3, 3, 4, 3], &mut rng), false)?;
    bn.running_mean.value = uniform(&[3], &mut rng);
    bn.running_var.value.fill(0.7);
    bn.set_mode(Mode::Eval);
    r.layer("batchnorm_eval", bn, uniform(&[3, 3, 4, 3], &mut rng), false)?;
    r.layer("relu", Relu::new(), spaced(&[2, 3, 4, 5], &mut rng), false)?;
    r.layer("maxpool2x2", MaxPool2x2::new(), spaced(&[1, 2, 6, 10], &mut rng), false)?;

    let input = uniform(&[3, 10], &mut rng);
    let mut probe = FnProbe {
        x: input.data().to_vec(),
        f: |x: &[f64]| dropout_projection(x).0,
        grad: |x: &[f64]| dropout_projection(x).1,
    };
    let check = CheckOptions {
        eps: STEP,
        samples: 30,
        kink_tolerance: None,
    };
    r.run(Component::Layers, "dropout", TOLERANCE, check, &mut probe, |i| format!("input[{i}]"))?;

    let labels = vec![2, 0, 4];
    let logits = uniform(&[3, 5], &mut rng);
    let mut probe = FnProbe {
        x: logits.data().to_vec(),
        f: |x: &[f64]| {
            let t = Tensor::from_vec(&[3, 5], x.to_vec()).expect("3x5");
            softmax_cross_entropy(&t, &labels, Reduction::Mean).expect("valid labels").mean
        },
        grad: |x: &[f64]| {
            let t = Tensor::from_vec(&[3, 5], x.to_vec()).expect("3x5");
            softmax_cross_entropy(&t, &labels, Reduction::Mean).expect("valid labels").grad.into_data()
        },
    };
    r.run(Component::Layers, "softmax_cross_entropy", TOLERANCE, check, &mut probe, |i| {
        format!("logit[{i}]")
    })?;

    let cfg = MscanConfig {
        width_multiplier: 0.125,
        dilation_set: vec![1, 2, 3],
        input_channels: 2,
        input_height: 32,
        input_width: 32,
    };
    let net = Mscan::<f64>::new(&cfg, &mut rng)?;
    r.layer("mscan", net, uniform(&[2, 2, 32, 32], &mut rng), true)
}

/// Dropout with a mask fixed by a constant seed, followed by a fixed projection.
fn dropout_projection(x: &[f64]) -> (f64, Vec<f64>) {
    let input = Tensor::from_vec(&[3, 10], x.to_vec()).expect("3x10");
    let mut layer = Dropout::<f64>::new(0.5).expect("valid rate");
    let y = layer.forward(&input, &mut ChaCha8Rng::seed_from_u64(3));
    let proj: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let value = y.data().iter().zip(&proj).map(|(a, b)| a * b).sum();
    let g = layer
        .backward(&Tensor::from_vec(&[3, 10], proj).expect("3x10"))
        .expect("same shape");
    (value, g.into_data())
}

fn projection(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn stn(r: &mut Runner) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, h, w, oh, ow) = (2, 9, 7, 5, 4);
    // sampling points with fractional pixel coordinates well away from integers
    let coords: Vec<f64> = (0..oh * ow)
        .flat_map(|k| {
            let px = (k % 5) as f64 + 0.5 + 0.6 * ((k * 37 % 11) as f64 / 11.0 - 0.5);
            let py = (k % 7) as f64 + 0.5 + 0.6 * ((k * 53 % 13) as f64 / 13.0 - 0.5);
            [px * 2.0 / (w - 1) as f64 - 1.0, py * 2.0 / (h - 1) as f64 - 1.0]
        })
        .collect();
    let grid = SamplingGrid {
        coords: Tensor::from_vec(&[oh, ow, 2], coords)?,
    };
    let up = projection(c * oh * ow, 4);
    let upt = Tensor::from_vec(&[c, oh, ow], up.clone())?;
    let dot = |t: &Tensor<f64>| t.data().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
    let image = uniform(&[c, h, w], &mut rng);

    let mut probe = FnProbe {
        x: image.data().to_vec(),
        f: |x: &[f64]| {
            let img = Tensor::from_vec(&[c, h, w], x.to_vec()).expect("image");
            dot(&bilinear_sample(&img, &grid).expect("valid grid"))
        },
        grad: |x: &[f64]| {
            let img = Tensor::from_vec(&[c, h, w], x.to_vec()).expect("image");
            let (gi, _) = bilinear_backward(&img, &grid, &upt, true).expect("valid grid");
            gi.expect("image gradient requested").into_data()
        },
    };
    let check = CheckOptions {
        eps: STEP,
        samples: 126,
        kink_tolerance: None,
    };
    r.run(Component::Stn, "sampler_image", TOLERANCE, check, &mut probe, |i| format!("image[{i}]"))?;

    // the sampler is smooth in its coordinates only inside a pixel cell, and the
    // points above sit at least 0.2 px from every cell boundary
    let mut probe = FnProbe {
        x: grid.coords.data().to_vec(),
        f: |x: &[f64]| {
            let g = SamplingGrid {
                coords: Tensor::from_vec(&[oh, ow, 2], x.to_vec()).expect("grid"),
            };
            dot(&bilinear_sample(&image, &g).expect("valid grid"))
        },
        grad: |x: &[f64]| {
            let g = SamplingGrid {
                coords: Tensor::from_vec(&[oh, ow, 2], x.to_vec()).expect("grid"),
            };
            bilinear_backward(&image, &g, &upt, false).expect("valid grid").1.into_data()
        },
    };
    let check = CheckOptions {
        eps: STEP,
        samples: 40,
        kink_tolerance: None,
    };
    r.run(Component::Stn, "sampler_grid", TOLERANCE, check, &mut probe, |i| {
        format!("grid[{}].{}", i / 2, ["x", "y"][i % 2])
    })?;

    // theta path: grid generation composed with the sampler, at a transform
    // whose 5x4 sampling points all sit at least 0.1 px inside a cell
    let up54 = projection(c * 5 * 4, 8);
    let up54t = Tensor::from_vec(&[c, 5, 4], up54.clone())?;
    let mut probe = FnProbe {
        x: vec![0.4, -0.1, 0.375, -0.15],
        f: |th: &[f64]| {
            let g = grid_generate(&theta_of(th), 5, 4).expect("5x4 grid");
            let out = bilinear_sample(&image, &g).expect("valid grid");
            out.data().iter().zip(&up54).map(|(a, b)| a * b).sum()
        },
        grad: |th: &[f64]| {
            let g = grid_generate(&theta_of(th), 5, 4).expect("5x4 grid");
            let (_, gg) = bilinear_backward(&image, &g, &up54t, false).expect("valid grid");
            grid_theta_gradient(&gg).expect("grid gradient").to_array().to_vec()
        },
    };
    let check = CheckOptions {
        eps: STEP,
        samples: 4,
        kink_tolerance: None,
    };
    r.run(Component::Stn, "sampler_theta", TOLERANCE, check, &mut probe, |i| {
        ["s_x", "t_x", "s_y", "t_y"][i].to_string()
    })
}

fn theta_of(x: &[f64]) -> TransformParams {
    TransformParams::from_array([x[0], x[1], x[2], x[3]])
}

fn losses(r: &mut Runner) -> Result<()> {
    let prior = PartPrior::new(0.0, 0.6);
    let check = CheckOptions {
        eps: STEP,
        samples: 4,
        kink_tolerance: None,
    };
    let names = |i: usize| ["s_x", "t_x", "s_y", "t_y"][i % 4].to_string();
    // every point sits at least 1e-2 from all hinge boundaries it is near
    let points = [
        ("center", [0.5, 0.8, 0.5, -0.3]),
        ("scale_range", [0.03, 0.1, -0.2, 0.4]),
        ("inside", [0.9, 0.35, 0.7, 0.6]),
    ];
    type LossFn = fn(&TransformParams, &PartPrior) -> (f64, TransformParams);
    let fns: [LossFn; 3] = [center_loss, scale_range_loss, |t, p| inside_loss(t, p, InsideEdges::Both)];
    for ((name, x0), f) in points.into_iter().zip(fns) {
        let mut probe = FnProbe {
            x: x0.to_vec(),
            f: |x: &[f64]| f(&theta_of(x), &prior).0,
            grad: |x: &[f64]| f(&theta_of(x), &prior).1.to_array().to_vec(),
        };
        r.run(Component::Losses, name, LOSS_TOLERANCE, check, &mut probe, names)?;
    }

    let priors = PartPrior::defaults();
    let w = LossWeights {
        xi1: 0.7,
        xi2: 1.3,
        ..Default::default()
    };
    let split = |x: &[f64]| -> Vec<TransformParams> { x.chunks(4).map(theta_of).collect() };
    let mut probe = FnProbe {
        x: vec![1.3, 0.7, 0.05, -1.1, 0.6, 0.2, 0.3, -0.15, -0.4, 0.9, 0.8, 0.75],
        f: |x: &[f64]| localization_loss(&split(x), &priors, &w).expect("three parts").total,
        grad: |x: &[f64]| {
            let l = localization_loss(&split(x), &priors, &w).expect("three parts");
            l.grads.iter().flat_map(|g| g.to_array()).collect()
        },
    };
    let check = CheckOptions { samples: 12, ..check };
    r.run(Component::Losses, "localization", LOSS_TOLERANCE, check, &mut probe, |i| {
        format!("part{}.{}", i / 4, names(i))
    })
}

fn model(r: &mut Runner) -> Result<()> {
    let cfg = ModelConfig::new(
        ModelMode::Fusion,
        MscanConfig {
            width_multiplier: 0.125,
            ..Default::default()
        },
        5,
    );
    let mut net = FusionNetwork::<f64>::new(&cfg, 6)?;
    // Move the heads off the bias-init point, which sits exactly on the
    // inside-image hinge, and make a few constraints active.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let parts = net.parts.as_mut().expect("fusion has parts");
    for (k, head) in parts.head.heads.iter_mut().enumerate() {
        for v in head.weight.value.data_mut() {
            *v = rng.gen_range(-0.002..0.002);
        }
        let b = head.bias.value.data_mut();
        b[0] += 0.013 * (k as f64 + 1.0);
        b[1] += 0.021;
        b[2] -= 0.017;
        b[3] += 0.009;
    }
    parts.head.heads[0].bias.value.data_mut()[0] = 0.05;
    let mut data = Vec::with_capacity(2 * 3 * 160 * 64);
    for s in 0..2 {
        data.extend(smooth_image(3, 160, 64, 0.7 * s as f64).into_data());
    }
    let x = Tensor::from_vec(&[2, 3, 160, 64], data)?;
    let mut probe = ModelProbe::new(net, x, vec![1, 3], LossWeights::default());
    let check = CheckOptions {
        eps: STEP,
        samples: 80,
        kink_tolerance: Some(1e-3),
    };
    let names: Vec<String> = (0..probe.num_coords()).map(|i| probe.coord_name(i)).collect();
    r.run(Component::Model, "fusion_model", TOLERANCE, check, &mut probe, |i| names[i].clone())?;

    probe.filter = vec!["loc.".into()];
    let names: Vec<String> = (0..probe.num_coords()).map(|i| probe.coord_name(i)).collect();
    let check = CheckOptions { samples: 40, ..check };
    r.run(Component::Model, "fusion_localization", TOLERANCE, check, &mut probe, |i| names[i].clone())
}

/// Run the checks of the given components in a fixed order.
pub fn run_suite(components: &[Component], opts: &SuiteOptions) -> Result<Vec<SuiteCheck>> {
    let mut r = Runner {
        opts,
        rng: ChaCha8Rng::seed_from_u64(99),
        out: Vec::new(),
    };
    for c in Component::ALL {
        if !components.contains(&c) {
            continue;
        }
        match c {
            Component::Layers => layers(&mut r)?,
            Component::Stn => stn(&mut r)?,
            Component::Losses => losses(&mut r)?,
            Component::Model => model(&mut r)?,
        }
    }
    if let Some(name) = &opts.corrupt {
        if !r.out.iter().any(|c| &c.name == name) {
            return Err(Error::Config(format!("no gradient check named {name:?} was run")));
        }
    }
    Ok(r.out)
}

/// The failing check with the largest error, if any.
pub fn worst_failure(checks: &[SuiteCheck]) -> Option<&SuiteCheck> {
    checks
        .iter()
        .filter(|c| !c.passed())
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
}
