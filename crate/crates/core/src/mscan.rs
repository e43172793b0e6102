//! Multi-scale context-aware network.
//!
//! A 5x5 stem convolution followed by four multi-scale blocks. Each block
//! runs parallel 3x3 convolutions with different dilation ratios (pad equal to
//! the dilation, so spatial size is preserved), normalizes and rectifies each
//! branch, and concatenates the branches along channels in dilation order.
//! Every convolution stage is followed by 2x2 max pooling.
//!
//! ```text
//! input   3x160x64
//! conv0   32x160x64   5x5, pad 2
//! pool0   32x80x32
//! conv1   96x80x32    3x3, dilation 1/2/3, pad 1/2/3, 32 filters each
//! pool1   96x40x16
//! ...
//! pool4   96x5x2
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, BatchNorm2d, Conv2d, Layer, MaxPool2x2, Mode, Module, Param, Relu};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, slice_channels, Shape4, Tensor};

/// Number of multi-scale blocks after the stem.
pub const NUM_BLOCKS: usize = 4;
/// Filters per branch at width multiplier 1.
pub const BASE_FILTERS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MscanConfig {
    /// Scales every filter count; 1.0 reproduces the reference architecture.
    pub width_multiplier: f64,
    /// Dilation ratio of each parallel branch (MSCAN-k has k entries).
    pub dilation_set: Vec<usize>,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for MscanConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            dilation_set: vec![1, 2, 3],
            input_channels: 3,
            input_height: 160,
            input_width: 64,
        }
    }
}

impl MscanConfig {
    pub fn with_input(&self, height: usize, width: usize) -> Self {
        Self {
            input_height: height,
            input_width: width,
            ..self.clone()
        }
    }

    /// Filters per branch (`32 * width_multiplier`).
    pub fn branch_filters(&self) -> Result<usize> {
        let f = BASE_FILTERS as f64 * self.width_multiplier;
        if !(f >= 1.0) || (f - f.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "width multiplier {} does not give a positive integer filter count",
                self.width_multiplier
            )));
        }
        Ok(f.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.branch_filters()?;
        if self.dilation_set.is_empty() {
            return Err(Error::Config("dilation set is empty".into()));
        }
        if self.dilation_set[0] == 0 || self.dilation_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dilation set {:?} must be positive and strictly increasing",
                self.dilation_set
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input needs at least one channel".into()));
        }
        let div = 1 << (NUM_BLOCKS + 1);
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % div != 0
            || self.input_width % div != 0
        {
            return Err(Error::InvalidShape(format!(
                "input {}x{} must be divisible by {div}",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    /// Channels of every block output (`branches * filters`).
    pub fn block_channels(&self) -> Result<usize> {
        Ok(self.branch_filters()? * self.dilation_set.len())
    }

    /// `(c, h, w)` of the final pooled maps.
    pub fn output_chw(&self) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let div = 1 << (NUM_BLOCKS + 1);
        Ok((self.block_channels()?, self.input_height / div, self.input_width / div))
    }

    /// Length of the flattened final maps.
    pub fn output_len(&self) -> Result<usize> {
        let (c, h, w) = self.output_chw()?;
        Ok(c * h * w)
    }

    /// Per-layer output shapes `conv0, pool0, conv1, pool1, ..., pool4`.
    pub fn layer_shapes(&self, batch: usize) -> Result<Vec<(String, Shape4)>> {
        self.validate()?;
        let f = self.branch_filters()?;
        let bc = self.block_channels()?;
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut out = vec![("conv0".to_string(), Shape4::new(batch, f, h, w)?)];
        h /= 2;
        w /= 2;
        out.push(("pool0".into(), Shape4::new(batch, f, h, w)?));
        for b in 1..=NUM_BLOCKS {
            out.push((format!("conv{b}"), Shape4::new(batch, bc, h, w)?));
            h /= 2;
            w /= 2;
            out.push((format!("pool{b}"), Shape4::new(batch, bc, h, w)?));
        }
        Ok(out)
    }
}

/// Convolution, batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvUnit<T: Scalar = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, kernel: usize, dilation: usize, pad: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_c, out_c, kernel, dilation, pad, rng),
            bn: BatchNorm2d::new(out_c),
            relu: Relu::new(),
        }
    }

    fn backward_inner(&mut self, grad_out: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let g = self.relu.backward(grad_out)?;
        let g = self.bn.backward(&g)?;
        if want_input {
            self.conv.backward(&g).map(Some)
        } else {
            self.conv.backward_params(&g).map(|_| None)
        }
    }
}

impl<T: Scalar> Module<T> for ConvUnit<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv.params(prefix, out);
        self.bn.params(&join(prefix, "bn"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.params_mut(prefix, out);
        self.bn.params_mut(&join(prefix, "bn"), out);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.bn.set_mode(mode);
    }
}

impl<T: Scalar> Layer<T> for ConvUnit<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(input)?;
        let y = self.bn.forward(&y)?;
        self.relu.forward(&y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backward_inner(grad_out, true)?.expect("input gradient requested"))
    }
}

/// Parallel dilated branches over one input, concatenated in branch order.
#[derive(Debug, Clone)]
pub struct MultiScaleBlock<T: Scalar = f32> {
    pub branches: Vec<ConvUnit<T>>,
}

impl<T: Scalar> MultiScaleBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, filters: usize, dilations: &[usize], rng: &mut R) -> Self {
        Self {
            branches: dilations.iter().map(|&d| ConvUnit::new(in_c, filters, 3, d, d, rng)).collect(),
        }
    }

    /// Concatenated convolution outputs before normalization, for inspecting branches.
    pub fn pre_norm(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.conv.forward(input))
            .collect::<Result<Vec<_>>>()?;
        concat_channels(&outs.iter().collect::<Vec<_>>())
    }
}

impl<T: Scalar> Module<T> for MultiScaleBlock<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, b) in self.branches.iter().enumerate() {
            b.params(&join(prefix, &format!("branch{i}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &format!("branch{i}")), out);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.branches.iter_mut().for_each(|b| b.set_mode(mode));
    }
}

impl<T: Scalar> Layer<T> for MultiScaleBlock<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(input))
            .collect::<Result<Vec<_>>>()?;
        concat_channels(&outs.iter().collect::<Vec<_>>())
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut start = 0;
        let mut total: Option<Tensor<T>> = None;
        for b in &mut self.branches {
            let c = b.conv.out_channels();
            let g = slice_channels(grad_out, start, c)?;
            start += c;
            let gx = b.backward(&g)?;
            match total.as_mut() {
                Some(t) => t.add_assign(&gx)?,
                None => total = Some(gx),
            }
        }
        total.ok_or_else(|| Error::Config("block without branches".into()))
    }
}

/// The full stem + four-block feature extractor.
#[derive(Debug, Clone)]
pub struct Mscan<T: Scalar = f32> {
    config: MscanConfig,
    pub conv0: ConvUnit<T>,
    pub blocks: Vec<MultiScaleBlock<T>>,
    pools: Vec<MaxPool2x2>,
    shapes: Vec<Shape4>,
}

impl<T: Scalar> Mscan<T> {
    /// Build with zero-mean He-normal weights, zero biases, unit gamma and zero beta.
    pub fn new<R: Rng + ?Sized>(config: &MscanConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let f = config.branch_filters()?;
        let bc = config.block_channels()?;
        let conv0 = ConvUnit::new(config.input_channels, f, 5, 1, 2, rng);
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for b in 0..NUM_BLOCKS {
            let in_c = if b == 0 { f } else { bc };
            blocks.push(MultiScaleBlock::new(in_c, f, &config.dilation_set, rng));
        }
        Ok(Self {
            config: config.clone(),
            conv0,
            blocks,
            pools: vec![MaxPool2x2::new(); NUM_BLOCKS + 1],
            shapes: Vec::new(),
        })
    }

    pub fn config(&self) -> &MscanConfig {
        &self.config
    }

    /// Output shape of every layer in the last forward pass.
    pub fn last_shapes(&self) -> &[Shape4] {
        &self.shapes
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<Shape4> {
        let s = input.dims4()?;
        let c = &self.config;
        if (s.c, s.h, s.w) != (c.input_channels, c.input_height, c.input_width) {
            return Err(Error::ShapeMismatch(format!(
                "network expects {}x{}x{} inputs, got {}x{}x{}",
                c.input_channels, c.input_height, c.input_width, s.c, s.h, s.w
            )));
        }
        Ok(s)
    }

    fn backward_inner(&mut self, grad_out: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let mut g = grad_out.clone();
        for b in (0..NUM_BLOCKS).rev() {
            g = Layer::<T>::backward(&mut self.pools[b + 1], &g)?;
            g = self.blocks[b].backward(&g)?;
        }
        g = Layer::<T>::backward(&mut self.pools[0], &g)?;
        self.conv0.backward_inner(&g, want_input)
    }

    /// Accumulate parameter gradients only; skips the input gradient of the stem.
    pub fn backward_params(&mut self, grad_out: &Tensor<T>) -> Result<()> {
        self.backward_inner(grad_out, false).map(|_| ())
    }
}

impl<T: Scalar> Module<T> for Mscan<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv0.params(&join(prefix, "conv0"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&join(prefix, &format!("conv{}", i + 1)), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv0.params_mut(&join(prefix, "conv0"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &format!("conv{}", i + 1)), out);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.conv0.set_mode(mode);
        self.blocks.iter_mut().for_each(|b| b.set_mode(mode));
    }
}

impl<T: Scalar> Layer<T> for Mscan<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        self.shapes.clear();
        let mut x = self.conv0.forward(input)?;
        self.shapes.push(x.dims4()?);
        x = Layer::<T>::forward(&mut self.pools[0], &x)?;
        self.shapes.push(x.dims4()?);
        for b in 0..NUM_BLOCKS {
            x = self.blocks[b].forward(&x)?;
            self.shapes.push(x.dims4()?);
            x = Layer::<T>::forward(&mut self.pools[b + 1], &x)?;
            self.shapes.push(x.dims4()?);
        }
        Ok(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backward_inner(grad_out, true)?.expect("input gradient requested"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_layer_shapes() {
        let shapes = MscanConfig::default().layer_shapes(1).unwrap();
        let chw: Vec<_> = shapes.iter().map(|(_, s)| s.chw()).collect();
        assert_eq!(
            chw,
            vec![
                (32, 160, 64),
                (32, 80, 32),
                (96, 80, 32),
                (96, 40, 16),
                (96, 40, 16),
                (96, 20, 8),
                (96, 20, 8),
                (96, 10, 4),
                (96, 10, 4),
                (96, 5, 2)
            ]
        );
        assert_eq!(MscanConfig::default().output_len().unwrap(), 960);
    }

    #[test]
    fn single_dilation_and_part_input() {
        let k1 = MscanConfig {
            dilation_set: vec![1],
            ..Default::default()
        };
        assert!(k1.layer_shapes(1).unwrap().iter().all(|(_, s)| s.c == 32));
        let part = MscanConfig::default().with_input(96, 64);
        assert_eq!(part.output_chw().unwrap(), (96, 3, 2));
        assert_eq!(part.output_len().unwrap(), 576);
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut MscanConfig)| {
            let mut c = MscanConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.width_multiplier = 0.3));
        assert!(bad(|c| c.width_multiplier = 0.0));
        assert!(bad(|c| c.dilation_set = vec![]));
        assert!(bad(|c| c.dilation_set = vec![2, 1]));
        assert!(bad(|c| c.dilation_set = vec![1, 1]));
        assert!(bad(|c| c.input_height = 150));
        assert!(matches!(
            MscanConfig { input_width: 60, ..Default::default() }.validate(),
            Err(Error::InvalidShape(_))
        ));
        assert!(!bad(|c| c.width_multiplier = 0.25));
    }

    #[test]
    fn zero_input_propagates_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MscanConfig {
            width_multiplier: 0.125,
            ..Default::default()
        };
        let mut net = Mscan::<f32>::new(&cfg, &mut rng).unwrap();
        let y = net.forward(&Tensor::zeros(&[2, 3, 160, 64])).unwrap();
        assert_eq!(y.shape(), &[2, 12, 5, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whole_network_gradient() {
        use crate::gradcheck::{finite_difference_check, CheckOptions, LayerProbe};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = MscanConfig {
            width_multiplier: 0.125,
            dilation_set: vec![1, 2],
            input_channels: 2,
            input_height: 32,
            input_width: 32,
        };
        let net = Mscan::<f64>::new(&cfg, &mut rng).unwrap();
        let x = Tensor::from_vec(&[2, 2, 32, 32], (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut probe = LayerProbe::new(net, x, 3);
        let opts = CheckOptions {
            eps: 1e-5,
            samples: 150,
            kink_tolerance: Some(1e-3),
        };
        let r = finite_difference_check(&mut probe, opts, &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
