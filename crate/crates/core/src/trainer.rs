//! Mini-batch SGD with momentum, step learning-rate decay and a reduced
//! learning rate for the localization network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Mode, Module, ParamKind};
use crate::model::FusionNetwork;
use crate::part_losses::LossWeights;
use crate::scalar::Scalar;
use crate::stn::{bilinear_sample, grid_generate, TransformParams};
use crate::tensor::Tensor;

pub const INPUT_HEIGHT: usize = 160;
pub const INPUT_WIDTH: usize = 64;
/// Pixel values are multiplied by this after mean subtraction.
pub const INPUT_SCALE: f64 = 1.0 / 256.0;

/// Parameters whose name starts with this belong to the localization network.
pub const LOC_PREFIX: &str = "loc.";
/// The three transform regression heads.
pub const LOC_HEAD_PREFIX: &str = "loc.head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// η
    pub base_lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// μ
    pub momentum: f64,
    /// L2 penalty on conv and FC weights.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Learning-rate multiplier of the localization network.
    pub loc_lr_ratio: f64,
    /// Seeds the split, shuffle, flip and dropout streams. Run configurations
    /// set it from their top-level seed.
    #[serde(skip)]
    pub seed: u64,
    /// Validation accuracy is measured every this many iterations (0 = only at the end).
    pub val_every: usize,
    /// Checkpoints are emitted every this many iterations (0 = at every decay step).
    pub checkpoint_every: usize,
    /// Random horizontal mirroring of training images.
    pub flip: bool,
    /// Keep the transform heads at their initial values.
    pub freeze_loc_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            lr_decay_every: 10_000,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-3,
            batch_size: 64,
            max_iters: 50_000,
            loc_lr_ratio: 0.01,
            seed: 0,
            val_every: 1000,
            checkpoint_every: 0,
            flip: true,
            freeze_loc_heads: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("loc_lr_ratio", self.loc_lr_ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} < 2: batch normalization needs two samples",
                self.batch_size
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be >= 1".into()));
        }
        Ok(())
    }

    /// `base_lr · factor^⌊iter / decay_every⌋`
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.base_lr * self.lr_decay_factor.powi((iter / self.lr_decay_every) as i32)
    }

    fn checkpoint_interval(&self) -> usize {
        if self.checkpoint_every == 0 {
            self.lr_decay_every
        } else {
            self.checkpoint_every
        }
    }
}

/// Velocity buffers, one per trainable parameter in `named_params` order.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T: Scalar = f32> {
    pub velocity: Vec<(String, Tensor<T>)>,
    pub iter: usize,
    pub lr: f64,
}

/// One momentum step:
/// `v ← μ·v + lr_p·(g + wd·w)`, `w ← w − v`, with `lr_p = lr·loc_lr_ratio`
/// for localization parameters. Weight decay touches conv/FC weights only.
pub fn sgd_step<T: Scalar, M: Module<T> + ?Sized>(
    net: &mut M,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = cfg.lr_at(state.iter);
    state.lr = lr;
    let params = net.named_params_mut();
    if state.velocity.is_empty() {
        state.velocity = params
            .iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(n, p)| (n.clone(), Tensor::zeros_like(&p.value)))
            .collect();
    }
    // validate everything before touching any weight
    for (name, p) in params.iter().filter(|(_, p)| p.kind.trainable()) {
        if !p.grad.is_finite() {
            return Err(Error::Divergence {
                param: name.clone(),
                iter: state.iter,
            });
        }
    }
    let mut vel = state.velocity.iter_mut();
    for (name, p) in params.into_iter().filter(|(_, p)| p.kind.trainable()) {
        let (vname, v) = vel
            .next()
            .ok_or_else(|| Error::Config(format!("optimizer has no velocity for {name}")))?;
        if *vname != name || v.shape() != p.value.shape() {
            return Err(Error::Config(format!("optimizer state for {vname} does not match {name}")));
        }
        if cfg.freeze_loc_heads && name.starts_with(LOC_HEAD_PREFIX) {
            continue;
        }
        let lr_p = if name.starts_with(LOC_PREFIX) { lr * cfg.loc_lr_ratio } else { lr };
        let wd = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
        let (mu, lr_p, wd) = (T::of(cfg.momentum), T::of(lr_p), T::of(wd));
        let grad = p.grad.data();
        for ((w, vi), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
            *vi = mu * *vi + lr_p * (g + wd * *w);
            *w -= *vi;
        }
    }
    state.iter += 1;
    Ok(())
}

/// Resize a raw `[3, h, w]` image (0..255 scale) to 160x64, subtract the
/// channel means and scale by 1/256.
pub fn preprocess(raw: &Tensor<f32>, means: &[f64; 3]) -> Result<Tensor<f32>> {
    let (c, h, w) = match raw.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::Ingest {
            path: "<memory>".into(),
            reason: format!("expected a [3, h, w] image, got {s:?}"),
        }),
    };
    if c != 3 || h < 8 || w < 8 {
        return Err(Error::Ingest {
            path: "<memory>".into(),
            reason: format!("degenerate image {c}x{h}x{w} (need 3 channels and at least 8x8)"),
        });
    }
    let resized = if (h, w) == (INPUT_HEIGHT, INPUT_WIDTH) {
        raw.clone()
    } else {
        bilinear_sample(raw, &grid_generate(&TransformParams::IDENTITY, INPUT_HEIGHT, INPUT_WIDTH)?)?
    };
    let plane = INPUT_HEIGHT * INPUT_WIDTH;
    let mut data = resized.into_data();
    for (ch, m) in means.iter().enumerate() {
        for v in &mut data[ch * plane..(ch + 1) * plane] {
            *v = ((*v as f64 - m) * INPUT_SCALE) as f32;
        }
    }
    Tensor::from_vec(&[3, INPUT_HEIGHT, INPUT_WIDTH], data)
}

/// Mirror sample `i` of an `[n, c, h, w]` batch about its vertical axis.
pub fn flip_sample<T: Scalar>(batch: &mut Tensor<T>, i: usize) -> Result<()> {
    let s = batch.dims4()?;
    let len = s.sample_len();
    for row in batch.data_mut()[i * len..(i + 1) * len].chunks_mut(s.w) {
        row.reverse();
    }
    Ok(())
}

/// Mirror each sample independently with probability 0.5; returns the decisions.
pub fn augment_flip<T: Scalar, R: Rng + ?Sized>(batch: &mut Tensor<T>, rng: &mut R) -> Result<Vec<bool>> {
    let n = batch.dims4()?.n;
    let flips: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    for (i, &f) in flips.iter().enumerate() {
        if f {
            flip_sample(batch, i)?;
        }
    }
    Ok(flips)
}

/// Preprocessed images with contiguous labels.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Dataset("no images".into()))?;
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(idx.len() * first.len());
        for &i in idx {
            data.extend_from_slice(self.images[i].data());
        }
        Ok((Tensor::from_vec(&shape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Hold out one random image per identity; returns (train, validation).
    pub fn split_validation<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Self, Self)> {
        let mut by_id = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.num_classes {
                return Err(Error::Label {
                    label: l,
                    classes: self.num_classes,
                });
            }
            by_id[l].push(i);
        }
        if self.num_classes < 2 {
            return Err(Error::Dataset(format!("need at least 2 identities, got {}", self.num_classes)));
        }
        let mut val = Vec::with_capacity(self.num_classes);
        for (id, members) in by_id.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::Dataset(format!(
                    "identity {id} has {} training image(s); at least 2 are needed",
                    members.len()
                )));
            }
            val.push(members[rng.gen_range(0..members.len())]);
        }
        let train: Vec<usize> = (0..self.len()).filter(|i| !val.contains(i)).collect();
        Ok((self.subset(&train), self.subset(&val)))
    }
}

/// Fraction of images whose arg-max logit is the label, in eval mode.
pub fn identification_accuracy(net: &mut FusionNetwork<f32>, data: &LabeledImages, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let prev = net.mode();
    net.set_mode(Mode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut res = Ok(());
    for chunk in idx.chunks(batch.max(1)) {
        let out = data.batch(chunk).and_then(|(x, y)| Ok((net.forward(&x, &mut rng)?, y)));
        match out {
            Ok((out, labels)) => {
                for (r, &y) in labels.iter().enumerate() {
                    let row = out.logits.row(r);
                    let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    correct += usize::from(best == y);
                }
            }
            Err(e) => {
                res = Err(e);
                break;
            }
        }
    }
    net.set_mode(prev);
    res.map(|_| correct as f64 / data.len() as f64)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_cen: f64,
    pub loss_pos: f64,
    pub loss_in: f64,
    pub loss_total: f64,
    /// Largest single constraint value of any part in the batch.
    pub worst_constraint: f64,
    pub val_acc: Option<f64>,
}

impl LogRow {
    /// CSV header; `with_parts` adds the transform-loss columns.
    pub fn csv_header(with_parts: bool) -> &'static str {
        if with_parts {
            "iter,lr,loss_cls,loss_cen,loss_pos,loss_in,loss_total,val_acc"
        } else {
            "iter,lr,loss_cls,loss_total,val_acc"
        }
    }

    pub fn csv_line(&self, with_parts: bool) -> String {
        let val = self.val_acc.map(|v| v.to_string()).unwrap_or_default();
        if with_parts {
            format!(
                "{},{},{},{},{},{},{},{}",
                self.iter, self.lr, self.loss_cls, self.loss_cen, self.loss_pos, self.loss_in, self.loss_total, val
            )
        } else {
            format!("{},{},{},{},{}", self.iter, self.lr, self.loss_cls, self.loss_total, val)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub final_val_acc: f64,
    pub train_size: usize,
    pub val_size: usize,
}

/// Random streams used during training, one per purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 11,
    Shuffle = 12,
    Flip = 13,
    Dropout = 14,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Train `net` on `data`. `on_checkpoint` is called with the iteration count
/// every checkpoint interval and after the last iteration.
pub fn train(
    net: &mut FusionNetwork<f32>,
    data: &LabeledImages,
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut on_checkpoint: impl FnMut(usize, &FusionNetwork<f32>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    weights.validate()?;
    if data.num_classes != net.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} identities, classifier has {}",
            data.num_classes,
            net.config().num_classes
        )));
    }
    let (train_set, val_set) = data.split_validation(&mut stream_rng(cfg.seed, Stream::Split))?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::Dataset(format!(
            "{} training images cannot fill a batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let mut shuffle = stream_rng(cfg.seed, Stream::Shuffle);
    let mut flip = stream_rng(cfg.seed, Stream::Flip);
    let mut dropout = stream_rng(cfg.seed, Stream::Dropout);
    let mut state = OptimizerState::default();
    let mut log = Vec::with_capacity(cfg.max_iters);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    net.set_mode(Mode::Train);
    let mut final_val_acc = 0.0;
    for iter in 0..cfg.max_iters {
        if cursor + cfg.batch_size > order.len() {
            order = (0..train_set.len()).collect();
            order.shuffle(&mut shuffle);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let (mut x, labels) = train_set.batch(idx)?;
        if cfg.flip {
            augment_flip(&mut x, &mut flip)?;
        }
        let loss = net.train_step_grads(&x, &labels, weights, &mut dropout)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                param: "loss".into(),
                iter,
            });
        }
        sgd_step(net, &mut state, cfg)?;
        let done = iter + 1;
        let val_acc = if done == cfg.max_iters || (cfg.val_every > 0 && done % cfg.val_every == 0) {
            let acc = identification_accuracy(net, &val_set, cfg.batch_size)?;
            final_val_acc = acc;
            Some(acc)
        } else {
            None
        };
        log.push(LogRow {
            iter,
            lr: state.lr,
            loss_cls: loss.cls,
            loss_cen: loss.center,
            loss_pos: loss.scale,
            loss_in: loss.inside,
            loss_total: loss.total,
            worst_constraint: loss.worst_constraint,
            val_acc,
        });
        if done == cfg.max_iters || done % cfg.checkpoint_interval() == 0 {
            on_checkpoint(done, net)?;
        }
    }
    Ok(TrainReport {
        log,
        final_val_acc,
        train_size: train_set.len(),
        val_size: val_set.len(),
    })
}
