//! Body, parts and fusion identity networks.
//!
//! * body: MSCAN → flatten → `fc` 128
//! * parts: localization MSCAN → 128-d embedding → three transforms → three
//!   96x64 crops → one shared part MSCAN → `fc0..fc2` 64 each → concat 192 → `fc` 128
//! * fusion: body 128 followed by parts 128
//!
//! Every feature FC is followed by dropout. The identity classifier sits on
//! top of the active feature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, softmax_cross_entropy, Dropout, Layer, Linear, Mode, Module, Param, Reduction};
use crate::mscan::{Mscan, MscanConfig};
use crate::part_losses::{localization_loss, total_objective, ConstraintValues, LossWeights, PartPrior};
use crate::scalar::Scalar;
use crate::stn::{
    bilinear_backward, crop_part, grid_generate, grid_theta_gradient, LocalizationHead, TransformParams,
    NUM_PARTS, PART_HEIGHT, PART_WIDTH,
};
use crate::tensor::{concat_columns, l2_normalize_rows, slice_columns, Tensor};

pub const BODY_FEATURES: usize = 128;
pub const PART_EMBEDDING: usize = 64;
pub const PART_FEATURES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Body,
    Parts,
    Fusion,
}

impl ModelMode {
    pub fn has_body(self) -> bool {
        matches!(self, ModelMode::Body | ModelMode::Fusion)
    }

    pub fn has_parts(self) -> bool {
        matches!(self, ModelMode::Parts | ModelMode::Fusion)
    }

    pub fn feature_dim(self) -> usize {
        match self {
            ModelMode::Body => BODY_FEATURES,
            ModelMode::Parts => PART_FEATURES,
            ModelMode::Fusion => BODY_FEATURES + PART_FEATURES,
        }
    }
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelMode::Body => "body",
            ModelMode::Parts => "parts",
            ModelMode::Fusion => "fusion",
        })
    }
}

impl std::str::FromStr for ModelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(ModelMode::Body),
            "parts" => Ok(ModelMode::Parts),
            "fusion" => Ok(ModelMode::Fusion),
            other => Err(Error::Config(format!("unknown mode {other:?} (body, parts or fusion)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub mscan: MscanConfig,
    pub num_classes: usize,
    pub dropout: f64,
    pub priors: [PartPrior; NUM_PARTS],
}

impl ModelConfig {
    pub fn new(mode: ModelMode, mscan: MscanConfig, num_classes: usize) -> Self {
        Self {
            mode,
            mscan,
            num_classes,
            dropout: 0.5,
            priors: PartPrior::defaults(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mscan.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 identities, got {}", self.num_classes)));
        }
        if self.mode.has_parts() && (self.mscan.input_height, self.mscan.input_width) != (160, 64) {
            return Err(Error::Config(format!(
                "part localization expects 160x64 inputs, got {}x{}",
                self.mscan.input_height, self.mscan.input_width
            )));
        }
        self.priors.iter().try_for_each(|p| p.validate())
    }
}

#[derive(Debug, Clone)]
pub struct BodyBranch<T: Scalar = f32> {
    pub mscan: Mscan<T>,
    pub fc: Linear<T>,
    pub dropout: Dropout<T>,
    map_shape: Vec<usize>,
}

impl<T: Scalar> BodyBranch<T> {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mscan = Mscan::new(&cfg.mscan, rng)?;
        let fc = Linear::new(cfg.mscan.output_len()?, BODY_FEATURES, rng);
        Ok(Self {
            mscan,
            fc,
            dropout: Dropout::new(cfg.dropout)?,
            map_shape: Vec::new(),
        })
    }

    fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let maps = self.mscan.forward(x)?;
        self.map_shape = maps.shape().to_vec();
        let flat = flatten(maps)?;
        let f = self.fc.forward(&flat)?;
        Ok(self.dropout.forward(&f, rng))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<()> {
        let g = self.dropout.backward(g)?;
        let g = self.fc.backward(&g)?;
        self.mscan.backward_params(&g.reshape(&self.map_shape)?)
    }
}

impl<T: Scalar> Module<T> for BodyBranch<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.mscan.params(&join(prefix, "mscan"), out);
        self.fc.params(&join(prefix, "fc"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.mscan.params_mut(&join(prefix, "mscan"), out);
        self.fc.params_mut(&join(prefix, "fc"), out);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mscan.set_mode(mode);
        self.dropout.mode = mode;
    }
}

/// Localization network plus the part feature network.
#[derive(Debug, Clone)]
pub struct PartBranch<T: Scalar = f32> {
    pub loc_mscan: Mscan<T>,
    pub head: LocalizationHead<T>,
    pub part_mscan: Mscan<T>,
    pub fc_parts: Vec<Linear<T>>,
    part_dropouts: Vec<Dropout<T>>,
    pub fc: Linear<T>,
    dropout: Dropout<T>,
    loc_shape: Vec<usize>,
    cache: Option<PartCache<T>>,
}

#[derive(Debug, Clone)]
struct PartCache<T: Scalar> {
    images: Tensor<T>,
    thetas: Vec<[TransformParams; NUM_PARTS]>,
    part_shape: Vec<usize>,
}

impl<T: Scalar> PartBranch<T> {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let loc_mscan = Mscan::new(&cfg.mscan, rng)?;
        let head = LocalizationHead::new(cfg.mscan.output_len()?, &cfg.priors, cfg.dropout, rng)?;
        let part_cfg = cfg.mscan.with_input(PART_HEIGHT, PART_WIDTH);
        let part_mscan = Mscan::new(&part_cfg, rng)?;
        let part_len = part_cfg.output_len()?;
        let fc_parts = (0..NUM_PARTS)
            .map(|_| Linear::new(part_len, PART_EMBEDDING, rng))
            .collect();
        let part_dropouts = (0..NUM_PARTS)
            .map(|_| Dropout::new(cfg.dropout))
            .collect::<Result<_>>()?;
        Ok(Self {
            loc_mscan,
            head,
            part_mscan,
            fc_parts,
            part_dropouts,
            fc: Linear::new(NUM_PARTS * PART_EMBEDDING, PART_FEATURES, rng),
            dropout: Dropout::new(cfg.dropout)?,
            loc_shape: Vec::new(),
            cache: None,
        })
    }

    /// Part transforms only (no crops, no features).
    pub fn localize<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, rng: &mut R) -> Result<Vec<[TransformParams; NUM_PARTS]>> {
        let maps = self.loc_mscan.forward(x)?;
        let shape = maps.shape().to_vec();
        self.loc_shape = shape;
        self.head.forward(&flatten(maps)?, rng)
    }

    fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, Vec<[TransformParams; NUM_PARTS]>)> {
        let s = x.dims4()?;
        let thetas = self.localize(x, rng)?;
        if let Some(bad) = thetas.iter().flatten().find(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                param: format!("part transform {bad:?}"),
                iter: 0,
            });
        }
        // part-major stack: row k * n + i holds part k of sample i
        let sample_len = s.sample_len();
        let crops: Vec<Vec<T>> = (0..NUM_PARTS * s.n)
            .into_par_iter()
            .map(|r| {
                let (k, i) = (r / s.n, r % s.n);
                let img = Tensor::from_vec(&[s.c, s.h, s.w], x.data()[i * sample_len..(i + 1) * sample_len].to_vec())?;
                Ok(crop_part(&img, &thetas[i][k])?.into_data())
            })
            .collect::<Result<_>>()?;
        let stacked = Tensor::from_vec(&[NUM_PARTS * s.n, s.c, PART_HEIGHT, PART_WIDTH], crops.concat())?;
        let maps = self.part_mscan.forward(&stacked)?;
        let part_shape = maps.shape().to_vec();
        let flat = flatten(maps)?;
        let width = flat.dims2()?.1;
        let mut embeds = Vec::with_capacity(NUM_PARTS);
        for k in 0..NUM_PARTS {
            let rows = Tensor::from_vec(&[s.n, width], flat.data()[k * s.n * width..(k + 1) * s.n * width].to_vec())?;
            let e = self.fc_parts[k].forward(&rows)?;
            embeds.push(self.part_dropouts[k].forward(&e, rng));
        }
        let joined = concat_columns(&embeds.iter().collect::<Vec<_>>())?;
        let f = self.fc.forward(&joined)?;
        let f = self.dropout.forward(&f, rng);
        self.cache = Some(PartCache {
            images: x.clone(),
            thetas: thetas.clone(),
            part_shape,
        });
        Ok((f, thetas))
    }

    /// `theta_grads` is an extra gradient on the transforms (the localization loss).
    fn backward(&mut self, g: &Tensor<T>, theta_grads: Option<&[[TransformParams; NUM_PARTS]]>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Config("part branch backward called before forward".into()))?;
        let n = cache.thetas.len();
        let g = self.dropout.backward(g)?;
        let g = self.fc.backward(&g)?;
        let mut flat = Vec::new();
        for k in 0..NUM_PARTS {
            let gk = slice_columns(&g, k * PART_EMBEDDING, PART_EMBEDDING)?;
            let gk = self.part_dropouts[k].backward(&gk)?;
            flat.extend(self.fc_parts[k].backward(&gk)?.into_data());
        }
        let g_crops = self.part_mscan.backward(&Tensor::from_vec(&cache.part_shape, flat)?)?;
        let s = cache.images.dims4()?;
        let (sample_len, crop_len) = (s.sample_len(), s.c * PART_HEIGHT * PART_WIDTH);
        let sampler_grads: Vec<TransformParams> = (0..NUM_PARTS * n)
            .into_par_iter()
            .map(|r| {
                let (k, i) = (r / n, r % n);
                let img = Tensor::from_vec(
                    &[s.c, s.h, s.w],
                    cache.images.data()[i * sample_len..(i + 1) * sample_len].to_vec(),
                )?;
                let up = Tensor::from_vec(
                    &[s.c, PART_HEIGHT, PART_WIDTH],
                    g_crops.data()[r * crop_len..(r + 1) * crop_len].to_vec(),
                )?;
                let grid = grid_generate(&cache.thetas[i][k], PART_HEIGHT, PART_WIDTH)?;
                let (_, g_grid) = bilinear_backward(&img, &grid, &up, false)?;
                grid_theta_gradient(&g_grid)
            })
            .collect::<Result<_>>()?;
        let mut g_theta = vec![[TransformParams::default(); NUM_PARTS]; n];
        for (r, gt) in sampler_grads.into_iter().enumerate() {
            g_theta[r % n][r / n] = gt;
        }
        if let Some(extra) = theta_grads {
            if extra.len() != n {
                return Err(Error::ShapeMismatch(format!("{} transform gradients for {n} samples", extra.len())));
            }
            for (a, b) in g_theta.iter_mut().zip(extra) {
                for k in 0..NUM_PARTS {
                    a[k] = a[k] + b[k];
                }
            }
        }
        let g_loc = self.head.backward(&g_theta)?;
        self.loc_mscan.backward_params(&g_loc.reshape(&self.loc_shape)?)
    }
}

impl<T: Scalar> Module<T> for PartBranch<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.loc_mscan.params("loc.mscan", out);
        self.head.params("loc", out);
        self.part_mscan.params(&join(prefix, "mscan"), out);
        for (k, fc) in self.fc_parts.iter().enumerate() {
            fc.params(&join(prefix, &format!("fc{k}")), out);
        }
        self.fc.params(&join(prefix, "fc"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.loc_mscan.params_mut("loc.mscan", out);
        self.head.params_mut("loc", out);
        self.part_mscan.params_mut(&join(prefix, "mscan"), out);
        for (k, fc) in self.fc_parts.iter_mut().enumerate() {
            fc.params_mut(&join(prefix, &format!("fc{k}")), out);
        }
        self.fc.params_mut(&join(prefix, "fc"), out);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.loc_mscan.set_mode(mode);
        self.head.set_mode(mode);
        self.part_mscan.set_mode(mode);
        self.part_dropouts.iter_mut().for_each(|d| d.mode = mode);
        self.dropout.mode = mode;
    }
}

fn flatten<T: Scalar>(maps: Tensor<T>) -> Result<Tensor<T>> {
    let s = maps.dims4()?;
    maps.reshape(&[s.n, s.sample_len()])
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar = f32> {
    /// `[n, d]`, after dropout in train mode.
    pub features: Tensor<T>,
    /// `[n, classes]`
    pub logits: Tensor<T>,
    /// Per-sample transforms, absent in body mode.
    pub thetas: Option<Vec<[TransformParams; NUM_PARTS]>>,
}

/// Loss values of one mini-batch and the gradients that start backpropagation.
#[derive(Debug, Clone)]
pub struct BatchLoss<T: Scalar = f32> {
    pub cls: f64,
    /// Batch means of the per-sample constraint sums (zero in body mode).
    pub center: f64,
    pub scale: f64,
    pub inside: f64,
    /// Batch mean of the weighted localization loss.
    pub loc: f64,
    pub total: f64,
    /// Largest single constraint value of any part in the batch.
    pub worst_constraint: f64,
    pub grad_logits: Tensor<T>,
    pub theta_grads: Option<Vec<[TransformParams; NUM_PARTS]>>,
}

/// Mean cross-entropy plus `λ` times the batch-mean localization loss.
pub fn batch_loss<T: Scalar>(
    out: &ForwardOutput<T>,
    labels: &[usize],
    priors: &[PartPrior; NUM_PARTS],
    weights: &LossWeights,
) -> Result<BatchLoss<T>> {
    let ce = softmax_cross_entropy(&out.logits, labels, Reduction::Mean)?;
    let mut res = BatchLoss {
        cls: ce.mean,
        center: 0.0,
        scale: 0.0,
        inside: 0.0,
        loc: 0.0,
        total: ce.mean,
        worst_constraint: 0.0,
        grad_logits: ce.grad,
        theta_grads: None,
    };
    if let Some(thetas) = &out.thetas {
        let n = thetas.len() as f64;
        let mut grads = Vec::with_capacity(thetas.len());
        for th in thetas {
            let l = localization_loss(th, priors, weights)?;
            res.loc += l.total / n;
            for c in &l.parts {
                res.center += c.center / n;
                res.scale += c.scale / n;
                res.inside += c.inside / n;
                res.worst_constraint = res.worst_constraint.max(c.max());
            }
            let mut g = [TransformParams::default(); NUM_PARTS];
            for k in 0..NUM_PARTS {
                g[k] = l.grads[k] * (weights.lambda / n);
            }
            grads.push(g);
        }
        res.total = total_objective(res.cls, res.loc, weights);
        res.theta_grads = Some(grads);
    }
    Ok(res)
}

/// Per-part constraint values of one transform triplet.
pub fn constraint_values(thetas: &[TransformParams; NUM_PARTS], priors: &[PartPrior; NUM_PARTS]) -> Result<Vec<ConstraintValues>> {
    Ok(localization_loss(thetas, priors, &LossWeights::default())?.parts)
}

#[derive(Debug, Clone)]
pub struct FusionNetwork<T: Scalar = f32> {
    config: ModelConfig,
    pub body: Option<BodyBranch<T>>,
    pub parts: Option<PartBranch<T>>,
    pub classifier: Linear<T>,
    mode: Mode,
    body_len: usize,
}

/// Independent initialization stream of one branch.
fn branch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> FusionNetwork<T> {
    /// Each branch and the classifier draw from their own stream of `seed`, so
    /// a body-only network and a fusion network built from the same seed share
    /// their body weights.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let body = config
            .mode
            .has_body()
            .then(|| BodyBranch::new(config, &mut branch_rng(seed, 1)))
            .transpose()?;
        let parts = config
            .mode
            .has_parts()
            .then(|| PartBranch::new(config, &mut branch_rng(seed, 2)))
            .transpose()?;
        let classifier = Linear::new(config.mode.feature_dim(), config.num_classes, &mut branch_rng(seed, 3));
        Ok(Self {
            config: config.clone(),
            body,
            parts,
            classifier,
            mode: Mode::Train,
            body_len: 0,
        })
    }

    /// Fusion network whose body branch comes from `body` and whose
    /// localization and part branches come from `parts`; the classifier is new.
    pub fn fuse(body: Self, parts: Self, seed: u64) -> Result<Self> {
        if body.config.mode != ModelMode::Body || parts.config.mode != ModelMode::Parts {
            return Err(Error::Checkpoint(format!(
                "fusion needs a body and a parts model, got {} and {}",
                body.config.mode, parts.config.mode
            )));
        }
        if body.config.mscan != parts.config.mscan {
            return Err(Error::Checkpoint(format!(
                "sub-model architectures differ: {:?} vs {:?}",
                body.config.mscan, parts.config.mscan
            )));
        }
        if body.config.num_classes != parts.config.num_classes {
            return Err(Error::Checkpoint(format!(
                "sub-models were trained on {} and {} identities",
                body.config.num_classes, parts.config.num_classes
            )));
        }
        let config = ModelConfig {
            mode: ModelMode::Fusion,
            ..parts.config.clone()
        };
        let mut net = Self {
            classifier: Linear::new(config.mode.feature_dim(), config.num_classes, &mut branch_rng(seed, 3)),
            config,
            body: body.body,
            parts: parts.parts,
            mode: Mode::Train,
            body_len: 0,
        };
        net.set_mode(Mode::Train);
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_mode(&self) -> ModelMode {
        self.config.mode
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn feature_dim(&self) -> usize {
        self.config.mode.feature_dim()
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, rng: &mut R) -> Result<ForwardOutput<T>> {
        let mut feats = Vec::with_capacity(2);
        if let Some(b) = self.body.as_mut() {
            feats.push(b.forward(x, rng)?);
        }
        let mut thetas = None;
        if let Some(p) = self.parts.as_mut() {
            let (f, th) = p.forward(x, rng)?;
            feats.push(f);
            thetas = Some(th);
        }
        self.body_len = if self.body.is_some() { BODY_FEATURES } else { 0 };
        let features = if feats.len() == 1 {
            feats.pop().expect("one feature")
        } else {
            concat_columns(&feats.iter().collect::<Vec<_>>())?
        };
        let logits = self.classifier.forward(&features)?;
        Ok(ForwardOutput {
            features,
            logits,
            thetas,
        })
    }

    /// Backpropagate from the logits (and, in part modes, an extra gradient on
    /// the transforms) into every parameter gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>, theta_grads: Option<&[[TransformParams; NUM_PARTS]]>) -> Result<()> {
        let g = self.classifier.backward(grad_logits)?;
        if let Some(b) = self.body.as_mut() {
            let gb = if self.parts.is_some() { slice_columns(&g, 0, self.body_len)? } else { g.clone() };
            b.backward(&gb)?;
        }
        if let Some(p) = self.parts.as_mut() {
            let gp = if self.body.is_some() {
                slice_columns(&g, self.body_len, PART_FEATURES)?
            } else {
                g
            };
            p.backward(&gp, theta_grads)?;
        }
        Ok(())
    }

    /// Forward, loss and backward of one batch; returns the loss values.
    pub fn train_step_grads<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        weights: &LossWeights,
        rng: &mut R,
    ) -> Result<BatchLoss<T>> {
        let out = self.forward(x, rng)?;
        let loss = batch_loss(&out, labels, &self.config.priors, weights)?;
        self.zero_grad();
        self.backward(&loss.grad_logits, loss.theta_grads.as_deref())?;
        Ok(loss)
    }

    /// L2-normalized eval-mode features `[n, d]`; the previous mode is restored.
    pub fn extract_features(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let prev = self.mode;
        self.set_mode(Mode::Eval);
        // dropout is inert in eval mode, so the rng is never drawn from
        let out = self.forward(x, &mut ChaCha8Rng::seed_from_u64(0));
        self.set_mode(prev);
        l2_normalize_rows(&out?.features)
    }

    /// Eval-mode part transforms `[n][3]`; errors without a localization network.
    pub fn localize(&mut self, x: &Tensor<T>) -> Result<Vec<[TransformParams; NUM_PARTS]>> {
        let prev = self.mode;
        self.set_mode(Mode::Eval);
        let parts = self
            .parts
            .as_mut()
            .ok_or_else(|| Error::Config("model has no localization network".into()));
        let res = parts.and_then(|p| p.localize(x, &mut ChaCha8Rng::seed_from_u64(0)));
        self.set_mode(prev);
        res
    }

    /// Every parameter, running statistics included, cast to `f32`.
    pub fn state(&self) -> Vec<(String, Tensor<f32>)> {
        self.named_params().into_iter().map(|(n, p)| (n, p.value.cast())).collect()
    }

    /// Overwrite parameters from a named list; every parameter must be present
    /// with a matching shape.
    pub fn load_state(&mut self, state: &[(String, Tensor<f32>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor<f32>> =
            state.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, p) in self.named_params_mut() {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    /// Same architecture in another precision with identical values.
    pub fn cast<U: Scalar>(&self) -> Result<FusionNetwork<U>> {
        let mut other = FusionNetwork::<U>::new(&self.config, 0)?;
        for ((na, a), (nb, b)) in self.named_params().into_iter().zip(other.named_params_mut()) {
            debug_assert_eq!(na, nb);
            b.value = a.value.cast();
        }
        other.set_mode(self.mode);
        Ok(other)
    }
}

impl<T: Scalar> Module<T> for FusionNetwork<T> {
    fn params<'a>(&'a self, _prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        if let Some(b) = &self.body {
            b.params("body", out);
        }
        if let Some(p) = &self.parts {
            p.params("part", out);
        }
        self.classifier.params("classifier", out);
    }

    fn params_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        if let Some(b) = &mut self.body {
            b.params_mut("body", out);
        }
        if let Some(p) = &mut self.parts {
            p.params_mut("part", out);
        }
        self.classifier.params_mut("classifier", out);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if let Some(b) = &mut self.body {
            b.set_mode(mode);
        }
        if let Some(p) = &mut self.parts {
            p.set_mode(mode);
        }
    }
}

/// Whole-model gradient probe: coordinates are the trainable parameters, the
/// loss is the training objective of a fixed batch with fixed dropout masks.
pub struct ModelProbe {
    pub net: FusionNetwork<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
    pub weights: LossWeights,
    pub dropout_seed: u64,
    /// Only parameters whose name starts with one of these are perturbed
    /// (all trainable parameters when empty).
    pub filter: Vec<String>,
    /// Scale applied to the analytic gradient; anything but 1 breaks it.
    pub corrupt: f64,
}

impl ModelProbe {
    pub fn new(net: FusionNetwork<f64>, input: Tensor<f64>, labels: Vec<usize>, weights: LossWeights) -> Self {
        Self {
            net,
            input,
            labels,
            weights,
            dropout_seed: 7,
            filter: Vec::new(),
            corrupt: 1.0,
        }
    }

    fn selected(&self, name: &str, p: &Param<f64>) -> bool {
        p.kind.trainable() && (self.filter.is_empty() || self.filter.iter().any(|f| name.starts_with(f.as_str())))
    }

    fn slots(&self) -> Vec<(usize, usize)> {
        self.net
            .named_params()
            .iter()
            .enumerate()
            .filter(|(_, (n, p))| self.selected(n, p))
            .map(|(k, (_, p))| (k, p.value.len()))
            .collect()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (k, len) in self.slots() {
            if i < len {
                return (k, i);
            }
            i -= len;
        }
        panic!("coordinate out of range")
    }

    /// Name of the parameter holding coordinate `i`.
    pub fn coord_name(&self, i: usize) -> String {
        let (k, j) = self.locate(i);
        format!("{}[{j}]", self.net.named_params()[k].0)
    }

    fn run(&mut self) -> Result<BatchLoss<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let out = self.net.forward(&self.input, &mut rng)?;
        batch_loss(&out, &self.labels, &self.net.config.priors, &self.weights)
    }
}

impl crate::gradcheck::Differentiable for ModelProbe {
    fn num_coords(&self) -> usize {
        self.slots().iter().map(|s| s.1).sum()
    }

    fn coord(&self, i: usize) -> f64 {
        let (k, j) = self.locate(i);
        self.net.named_params()[k].1.value.data()[j]
    }

    fn set_coord(&mut self, i: usize, v: f64) {
        let (k, j) = self.locate(i);
        self.net.named_params_mut()[k].1.value.data_mut()[j] = v;
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(self.run()?.total)
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        let loss = self.run()?;
        self.net.zero_grad();
        self.net.backward(&loss.grad_logits, loss.theta_grads.as_deref())?;
        let mut g = Vec::new();
        for (n, p) in self.net.named_params() {
            if self.selected(&n, p) {
                g.extend(p.grad.data().iter().map(|v| v * self.corrupt));
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, CheckOptions};

    fn small(mode: ModelMode) -> ModelConfig {
        ModelConfig::new(
            mode,
            MscanConfig {
                width_multiplier: 0.125,
                ..Default::default()
            },
            5,
        )
    }

    fn batch<T: Scalar>(n: usize, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[n, 3, 160, 64],
            (0..n * 3 * 160 * 64).map(|_| T::of(rng.gen_range(-0.5..0.5))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_shapes_per_mode() {
        let x = batch::<f32>(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (mode, d) in [(ModelMode::Body, 128), (ModelMode::Parts, 128), (ModelMode::Fusion, 256)] {
            let mut net = FusionNetwork::<f32>::new(&small(mode), 4).unwrap();
            let out = net.forward(&x, &mut rng).unwrap();
            assert_eq!(out.features.shape(), &[2, d]);
            assert_eq!(out.logits.shape(), &[2, 5]);
            assert_eq!(out.thetas.is_some(), mode.has_parts());
            if let Some(th) = out.thetas {
                assert_eq!(th.len(), 2);
            }
            assert_eq!(net.classifier.inputs(), d);
        }
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let mut net = FusionNetwork::<f32>::new(&small(ModelMode::Body), 4).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 3, 128, 64]);
        assert!(net.forward(&x, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn initial_transforms_sit_on_priors() {
        let mut net = FusionNetwork::<f32>::new(&small(ModelMode::Parts), 4).unwrap();
        let th = net.localize(&batch(2, 3)).unwrap();
        let priors = PartPrior::defaults();
        for t in &th {
            for (k, p) in priors.iter().enumerate() {
                assert_eq!(t[k].tx as f32, p.cx as f32);
                assert_eq!(t[k].ty as f32, p.cy as f32);
                assert!((t[k].sx - 0.4).abs() < 1e-7);
            }
            let l = localization_loss(t, &priors, &LossWeights::default()).unwrap();
            assert_eq!(l.total, 0.0);
        }
    }

    #[test]
    fn features_are_unit_and_deterministic() {
        let mut net = FusionNetwork::<f32>::new(&small(ModelMode::Fusion), 4).unwrap();
        let x = batch(3, 5);
        let a = net.extract_features(&x).unwrap();
        let b = net.extract_features(&x).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            let norm: f64 = a.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert_eq!(net.mode(), Mode::Train);
    }

    #[test]
    fn fusion_prefix_is_body_feature() {
        let mut fusion = FusionNetwork::<f32>::new(&small(ModelMode::Fusion), 9).unwrap();
        let mut body = FusionNetwork::<f32>::new(&small(ModelMode::Body), 9).unwrap();
        fusion.set_mode(Mode::Eval);
        body.set_mode(Mode::Eval);
        let x = batch(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = fusion.forward(&x, &mut rng).unwrap().features;
        let b = body.forward(&x, &mut rng).unwrap().features;
        for i in 0..2 {
            assert_eq!(&f.row(i)[..128], b.row(i));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = FusionNetwork::<f32>::new(&small(ModelMode::Fusion), 11).unwrap();
        let b = FusionNetwork::<f32>::new(&small(ModelMode::Fusion), 11).unwrap();
        let c = FusionNetwork::<f32>::new(&small(ModelMode::Fusion), 12).unwrap();
        assert_eq!(a.state(), b.state());
        assert_ne!(a.state(), c.state());
    }

    #[test]
    fn different_seeds_give_different_features() {
        let x = batch::<f32>(2, 8);
        let fa = FusionNetwork::<f32>::new(&small(ModelMode::Body), 1).unwrap().extract_features(&x).unwrap();
        let fb = FusionNetwork::<f32>::new(&small(ModelMode::Body), 2).unwrap().extract_features(&x).unwrap();
        let cos: f64 = fa.row(0).iter().zip(fb.row(0)).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!(cos < 0.999);
    }

    #[test]
    fn fuse_copies_branches() {
        let body = FusionNetwork::<f32>::new(&small(ModelMode::Body), 1).unwrap();
        let parts = FusionNetwork::<f32>::new(&small(ModelMode::Parts), 2).unwrap();
        let body_state = body.state();
        let parts_state = parts.state();
        let fused = FusionNetwork::fuse(body, parts, 3).unwrap();
        assert_eq!(fused.model_mode(), ModelMode::Fusion);
        assert_eq!(fused.classifier.inputs(), 256);
        let st: std::collections::HashMap<_, _> = fused.state().into_iter().collect();
        for (n, t) in body_state.iter().chain(&parts_state) {
            if !n.starts_with("classifier") {
                assert_eq!(&st[n], t, "{n}");
            }
        }
        let wide = ModelConfig {
            mscan: MscanConfig {
                width_multiplier: 0.25,
                ..Default::default()
            },
            ..small(ModelMode::Parts)
        };
        let body = FusionNetwork::<f32>::new(&small(ModelMode::Body), 1).unwrap();
        let parts = FusionNetwork::<f32>::new(&wide, 2).unwrap();
        assert!(matches!(FusionNetwork::fuse(body, parts, 3), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn state_round_trip() {
        let a = FusionNetwork::<f32>::new(&small(ModelMode::Parts), 1).unwrap();
        let mut b = FusionNetwork::<f32>::new(&small(ModelMode::Parts), 2).unwrap();
        b.load_state(&a.state()).unwrap();
        assert_eq!(a.state(), b.state());
        let mut st = a.state();
        st.pop();
        assert!(b.load_state(&st).is_err());
    }

    #[test]
    fn gradient_reaches_transform_heads() {
        let mut cfg = small(ModelMode::Parts);
        cfg.dropout = 0.5;
        let mut net = FusionNetwork::<f64>::new(&cfg, 6).unwrap();
        // move the heads off the hinge boundaries and make a few constraints active
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..NUM_PARTS {
            let head = &mut net.parts.as_mut().unwrap().head.heads[k];
            for v in head.weight.value.data_mut() {
                *v = rng.gen_range(-0.01..0.01);
            }
            let b = head.bias.value.data_mut();
            b[0] += 0.013 * (k as f64 + 1.0);
            b[1] += 0.021;
            b[2] -= 0.017;
            b[3] += 0.009;
        }
        net.parts.as_mut().unwrap().head.heads[0].bias.value.data_mut()[0] = 0.05;
        let mut probe = ModelProbe::new(net, batch(2, 4), vec![1, 3], LossWeights::default());
        probe.filter = vec!["loc.head".into()];
        let opts = CheckOptions {
            eps: 1e-6,
            samples: 40,
            kink_tolerance: Some(1e-3),
        };
        let r = finite_difference_check(&mut probe, opts, &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
