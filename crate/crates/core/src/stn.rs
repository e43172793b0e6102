//! Constrained spatial transformer: localization head, scale/translation
//! sampling grids and differentiable bilinear sampling.
//!
//! Image coordinates are normalized to `[-1, 1]` on both axes with `-1` at
//! the left column and the top row. A normalized coordinate maps to pixels as
//! `px = (x + 1) * (w - 1) / 2`, so `-1` and `1` land exactly on the corner
//! pixel centres.

use std::ops::{Add, Mul, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, Dropout, Layer, Linear, Mode, Module, Param, Relu};
use crate::part_losses::PartPrior;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Height of a cropped part image.
pub const PART_HEIGHT: usize = 96;
/// Width of a cropped part image.
pub const PART_WIDTH: usize = 64;
/// Number of latent parts.
pub const NUM_PARTS: usize = 3;
/// Width of the shared localization embedding.
pub const LOC_FEATURES: usize = 128;
/// Initial scale of every part transform.
pub const INIT_SCALE: f64 = 0.4;

/// `[s_x, t_x, s_y, t_y]`: input coordinates are `x_in = s_x * x_out + t_x`
/// and `y_in = s_y * y_out + t_y`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformParams {
    pub sx: f64,
    pub tx: f64,
    pub sy: f64,
    pub ty: f64,
}

impl TransformParams {
    pub const IDENTITY: Self = Self {
        sx: 1.0,
        tx: 0.0,
        sy: 1.0,
        ty: 0.0,
    };

    pub fn new(sx: f64, tx: f64, sy: f64, ty: f64) -> Self {
        Self { sx, tx, sy, ty }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.sx, self.tx, self.sy, self.ty]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `(x0, x1, y0, y1)` extent of the crop in normalized input coordinates.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let (xa, xb) = (self.tx - self.sx, self.tx + self.sx);
        let (ya, yb) = (self.ty - self.sy, self.ty + self.sy);
        (xa.min(xb), xa.max(xb), ya.min(yb), ya.max(yb))
    }
}

impl Add for TransformParams {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.sx + o.sx, self.tx + o.tx, self.sy + o.sy, self.ty + o.ty)
    }
}

impl Sub for TransformParams {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.sx - o.sx, self.tx - o.tx, self.sy - o.sy, self.ty - o.ty)
    }
}

impl Mul<f64> for TransformParams {
    type Output = Self;
    fn mul(self, k: f64) -> Self {
        Self::new(self.sx * k, self.tx * k, self.sy * k, self.ty * k)
    }
}

/// Normalized output coordinate of index `i` on an axis of length `n >= 2`.
fn lattice(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

/// Input-space sampling positions for every output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    /// `[out_h, out_w, 2]` holding `(x_in, y_in)`.
    pub coords: Tensor<f64>,
}

impl SamplingGrid {
    pub fn out_h(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn out_w(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let k = (i * self.out_w() + j) * 2;
        (self.coords.data()[k], self.coords.data()[k + 1])
    }
}

/// Apply the scale/translation warp to a uniform `[-1, 1]` output lattice.
pub fn grid_generate(theta: &TransformParams, out_h: usize, out_w: usize) -> Result<SamplingGrid> {
    if out_h < 2 || out_w < 2 {
        return Err(Error::InvalidShape(format!(
            "sampling grid needs at least 2x2 outputs, got {out_h}x{out_w}"
        )));
    }
    let mut data = Vec::with_capacity(out_h * out_w * 2);
    for i in 0..out_h {
        let y = theta.sy * lattice(i, out_h) + theta.ty;
        for j in 0..out_w {
            data.push(theta.sx * lattice(j, out_w) + theta.tx);
            data.push(y);
        }
    }
    Ok(SamplingGrid {
        coords: Tensor::from_vec(&[out_h, out_w, 2], data)?,
    })
}

/// Pull a gradient on grid coordinates back to the transform parameters.
pub fn grid_theta_gradient(grid_grad: &Tensor<f64>) -> Result<TransformParams> {
    let (h, w) = match grid_grad.shape() {
        &[h, w, 2] if h >= 2 && w >= 2 => (h, w),
        s => return Err(Error::ShapeMismatch(format!("grid gradient shape {s:?}"))),
    };
    let mut g = TransformParams::default();
    let d = grid_grad.data();
    for i in 0..h {
        let y_out = lattice(i, h);
        for j in 0..w {
            let k = (i * w + j) * 2;
            g.sx += d[k] * lattice(j, w);
            g.tx += d[k];
            g.sy += d[k + 1] * y_out;
            g.ty += d[k + 1];
        }
    }
    Ok(g)
}

/// Left tap index and the weight of the right tap for pixel coordinate `p`.
///
/// The left tap is `ceil(p) - 1`, so at an exact pixel centre the sample sits
/// at the right end of the lower cell and the coordinate derivative uses that
/// cell's slope.
#[inline]
fn taps(p: f64) -> (isize, f64) {
    let i0 = p.ceil() - 1.0;
    (i0 as isize, p - i0)
}

struct Tap {
    x0: isize,
    y0: isize,
    wx: f64,
    wy: f64,
    sx: f64,
    sy: f64,
}

fn tap_for(x: f64, y: f64, h: usize, w: usize) -> Tap {
    let sx = (w as f64 - 1.0) / 2.0;
    let sy = (h as f64 - 1.0) / 2.0;
    let (x0, wx) = taps((x + 1.0) * sx);
    let (y0, wy) = taps((y + 1.0) * sy);
    Tap { x0, y0, wx, wy, sx, sy }
}

#[inline]
fn pixel<T: Scalar>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
        0.0
    } else {
        plane[y as usize * w + x as usize].f64()
    }
}

/// Bilinearly sample a `[c, h, w]` image at the grid positions; taps outside
/// the image read as zero.
pub fn bilinear_sample<T: Scalar>(image: &Tensor<T>, grid: &SamplingGrid) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image)?;
    let (oh, ow) = (grid.out_h(), grid.out_w());
    let mut out = vec![T::zero(); c * oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let (x, y) = grid.at(i, j);
            let t = tap_for(x, y, h, w);
            for ch in 0..c {
                let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
                let v00 = pixel(plane, h, w, t.y0, t.x0);
                let v01 = pixel(plane, h, w, t.y0, t.x0 + 1);
                let v10 = pixel(plane, h, w, t.y0 + 1, t.x0);
                let v11 = pixel(plane, h, w, t.y0 + 1, t.x0 + 1);
                let top = v00 * (1.0 - t.wx) + v01 * t.wx;
                let bottom = v10 * (1.0 - t.wx) + v11 * t.wx;
                out[(ch * oh + i) * ow + j] = T::of(top * (1.0 - t.wy) + bottom * t.wy);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

fn chw<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::ShapeMismatch(format!("expected a [c, h, w] image, got {s:?}"))),
    }
}

/// Gradients of [`bilinear_sample`] with respect to the image (optional) and
/// the grid coordinates.
pub fn bilinear_backward<T: Scalar>(
    image: &Tensor<T>,
    grid: &SamplingGrid,
    grad_out: &Tensor<T>,
    want_image: bool,
) -> Result<(Option<Tensor<T>>, Tensor<f64>)> {
    let (c, h, w) = chw(image)?;
    let (oh, ow) = (grid.out_h(), grid.out_w());
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "sampler upstream gradient {:?} vs [{c}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let mut gimg = want_image.then(|| vec![0.0f64; c * h * w]);
    let mut ggrid = vec![0.0f64; oh * ow * 2];
    for i in 0..oh {
        for j in 0..ow {
            let (x, y) = grid.at(i, j);
            let t = tap_for(x, y, h, w);
            for ch in 0..c {
                let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
                let g = grad_out.data()[(ch * oh + i) * ow + j].f64();
                if g == 0.0 {
                    continue;
                }
                let v00 = pixel(plane, h, w, t.y0, t.x0);
                let v01 = pixel(plane, h, w, t.y0, t.x0 + 1);
                let v10 = pixel(plane, h, w, t.y0 + 1, t.x0);
                let v11 = pixel(plane, h, w, t.y0 + 1, t.x0 + 1);
                let d_px = (1.0 - t.wy) * (v01 - v00) + t.wy * (v11 - v10);
                let d_py = (1.0 - t.wx) * (v10 - v00) + t.wx * (v11 - v01);
                let k = (i * ow + j) * 2;
                ggrid[k] += g * d_px * t.sx;
                ggrid[k + 1] += g * d_py * t.sy;
                if let Some(gi) = gimg.as_mut() {
                    let plane_g = &mut gi[ch * h * w..(ch + 1) * h * w];
                    for (dy, dx, wt) in [
                        (0, 0, (1.0 - t.wx) * (1.0 - t.wy)),
                        (0, 1, t.wx * (1.0 - t.wy)),
                        (1, 0, (1.0 - t.wx) * t.wy),
                        (1, 1, t.wx * t.wy),
                    ] {
                        let (yy, xx) = (t.y0 + dy, t.x0 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            plane_g[yy as usize * w + xx as usize] += g * wt;
                        }
                    }
                }
            }
        }
    }
    let gimg = gimg
        .map(|d| Tensor::from_vec(&[c, h, w], d.into_iter().map(T::of).collect()))
        .transpose()?;
    Ok((gimg, Tensor::from_vec(&[oh, ow, 2], ggrid)?))
}

/// Crop one part: a 96x64 grid warped by `theta`, bilinearly sampled.
pub fn crop_part<T: Scalar>(image: &Tensor<T>, theta: &TransformParams) -> Result<Tensor<T>> {
    let grid = grid_generate(theta, PART_HEIGHT, PART_WIDTH)?;
    bilinear_sample(image, &grid)
}

/// Gradient of a part crop with respect to its transform.
pub fn crop_part_theta_gradient<T: Scalar>(
    image: &Tensor<T>,
    theta: &TransformParams,
    grad_out: &Tensor<T>,
) -> Result<TransformParams> {
    let grid = grid_generate(theta, PART_HEIGHT, PART_WIDTH)?;
    let (_, ggrid) = bilinear_backward(image, &grid, grad_out, false)?;
    grid_theta_gradient(&ggrid)
}

/// `INIT_SCALE` in `T`, lowered by rounding where needed so that
/// `(s + |c|)² <= γ` holds exactly for the rounded centre `c`.
fn initial_scale<T: Scalar>(c: f64, gamma: f64) -> T {
    let mut s = T::of(INIT_SCALE);
    let bound = gamma.sqrt() - c.abs();
    while (s.f64() + c.abs()).powi(2) > gamma && s.f64() > 0.0 {
        let below = T::of(bound.min(s.f64()));
        s = if below < s { below } else { T::of(s.f64() * (1.0 - 1e-7)) };
    }
    s
}

/// Shared 128-d embedding of the localization maps followed by one 4-d
/// regression head per part.
#[derive(Debug, Clone)]
pub struct LocalizationHead<T: Scalar = f32> {
    pub fc_loc: Linear<T>,
    relu: Relu,
    pub dropout: Dropout<T>,
    pub heads: Vec<Linear<T>>,
}

impl<T: Scalar> LocalizationHead<T> {
    /// Head weights start at zero and biases at `[0.4, c_x, 0.4, c_y]`, so every
    /// part begins centred on its prior inside the feasible region.
    pub fn new<R: Rng + ?Sized>(inputs: usize, priors: &[PartPrior], dropout: f64, rng: &mut R) -> Result<Self> {
        if priors.len() != NUM_PARTS {
            return Err(Error::Config(format!(
                "expected {NUM_PARTS} part priors, got {}",
                priors.len()
            )));
        }
        let heads = priors
            .iter()
            .map(|p| {
                let (cx, cy) = (T::of(p.cx), T::of(p.cy));
                let sx = initial_scale::<T>(cx.f64(), p.gamma);
                let sy = initial_scale::<T>(cy.f64(), p.gamma);
                Linear::from_params(
                    Tensor::zeros(&[4, LOC_FEATURES]),
                    Tensor::from_vec(&[4], vec![sx, cx, sy, cy])?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fc_loc: Linear::new(inputs, LOC_FEATURES, rng),
            relu: Relu::new(),
            dropout: Dropout::new(dropout)?,
            heads,
        })
    }

    /// Flattened localization maps `[n, d]` to `n` transform triplets.
    pub fn forward<R: Rng + ?Sized>(&mut self, flat: &Tensor<T>, rng: &mut R) -> Result<Vec<[TransformParams; NUM_PARTS]>> {
        let z = self.fc_loc.forward(flat)?;
        let z = self.relu.forward(&z)?;
        let z = self.dropout.forward(&z, rng);
        let n = z.dims2()?.0;
        let mut thetas = vec![[TransformParams::default(); NUM_PARTS]; n];
        for (k, head) in self.heads.iter_mut().enumerate() {
            let t = head.forward(&z)?;
            for (s, th) in thetas.iter_mut().enumerate() {
                let r = t.row(s);
                th[k] = TransformParams::new(r[0].f64(), r[1].f64(), r[2].f64(), r[3].f64());
            }
        }
        Ok(thetas)
    }

    /// Backpropagate per-sample transform gradients to the flattened maps.
    pub fn backward(&mut self, grads: &[[TransformParams; NUM_PARTS]]) -> Result<Tensor<T>> {
        let n = grads.len();
        let mut gz: Option<Tensor<T>> = None;
        for (k, head) in self.heads.iter_mut().enumerate() {
            let data = grads.iter().flat_map(|g| g[k].to_array().map(T::of)).collect();
            let g = head.backward(&Tensor::from_vec(&[n, 4], data)?)?;
            match gz.as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => gz = Some(g),
            }
        }
        let g = self.dropout.backward(&gz.expect("NUM_PARTS > 0"))?;
        let g = self.relu.backward(&g)?;
        self.fc_loc.backward(&g)
    }
}

impl<T: Scalar> Module<T> for LocalizationHead<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.fc_loc.params(&join(prefix, "fc"), out);
        for (k, h) in self.heads.iter().enumerate() {
            h.params(&join(prefix, &format!("head{k}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.fc_loc.params_mut(&join(prefix, "fc"), out);
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.params_mut(&join(prefix, &format!("head{k}")), out);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.dropout.mode = mode;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, CheckOptions, FnProbe};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn identity_grid_is_lattice() {
        let g = grid_generate(&TransformParams::IDENTITY, 3, 5).unwrap();
        assert_eq!(g.at(0, 0), (-1.0, -1.0));
        assert_eq!(g.at(2, 4), (1.0, 1.0));
        assert_eq!(g.at(1, 2), (0.0, 0.0));
        assert!(close(g.at(1, 1).0, -0.5));
    }

    #[test]
    fn scaled_grid_corners() {
        let g = grid_generate(&TransformParams::new(0.5, 0.0, 0.5, 0.6), 4, 4).unwrap();
        let (x0, y0) = g.at(0, 0);
        let (x1, y1) = g.at(3, 3);
        assert!(close(x0, -0.5) && close(x1, 0.5));
        assert!(close(y0, 0.1) && close(y1, 1.1));
    }

    #[test]
    fn zero_scale_collapses() {
        let g = grid_generate(&TransformParams::new(0.0, 0.2, 0.0, -0.3), 3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.at(i, j), (0.2, -0.3));
            }
        }
        assert!(grid_generate(&TransformParams::IDENTITY, 1, 4).is_err());
    }

    #[test]
    fn grid_is_affine_in_theta() {
        let a = TransformParams::new(0.3, -0.2, 1.1, 0.5);
        let b = TransformParams::new(-0.7, 0.4, 0.2, -0.1);
        let ga = grid_generate(&a, 4, 3).unwrap();
        let gb = grid_generate(&b, 4, 3).unwrap();
        let gs = grid_generate(&(a + b), 4, 3).unwrap();
        let g0 = grid_generate(&TransformParams::default(), 4, 3).unwrap();
        for k in 0..24 {
            let want = ga.coords.data()[k] + gb.coords.data()[k] - g0.coords.data()[k];
            assert!((gs.coords.data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_examples() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let grid = SamplingGrid {
            coords: Tensor::from_vec(&[1, 1, 2], vec![0.0, 0.0]).unwrap(),
        };
        assert_eq!(bilinear_sample(&img, &grid).unwrap().data(), &[1.5]);

        // pixel centre (1, 0) of a 3-wide image: x = 0, y = -1
        let img = Tensor::from_vec(&[1, 2, 3], vec![4.0f32, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let grid = SamplingGrid {
            coords: Tensor::from_vec(&[1, 1, 2], vec![0.0, -1.0]).unwrap(),
        };
        assert_eq!(bilinear_sample(&img, &grid).unwrap().data(), &[5.0]);
    }

    #[test]
    fn identity_resampling_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..3 * 160 * 64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let img = Tensor::from_vec(&[3, 160, 64], data).unwrap();
        let grid = grid_generate(&TransformParams::IDENTITY, 160, 64).unwrap();
        assert_eq!(bilinear_sample(&img, &grid).unwrap(), img);
    }

    #[test]
    fn outside_samples_read_zero() {
        let img = Tensor::<f32>::new(&[1, 4, 4], 1.0).unwrap();
        let g = grid_generate(&TransformParams::new(0.1, 5.0, 0.1, 0.0), 2, 2).unwrap();
        assert!(bilinear_sample(&img, &g).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_shape_is_fixed() {
        let img = Tensor::<f32>::new(&[3, 160, 64], 0.5).unwrap();
        for th in [
            TransformParams::IDENTITY,
            TransformParams::new(0.4, 0.0, 0.4, 0.6),
            TransformParams::new(-3.0, 2.0, 0.01, -9.0),
        ] {
            assert_eq!(crop_part(&img, &th).unwrap().shape(), &[3, 96, 64]);
        }
    }

    #[test]
    fn image_gradient_mass_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::from_vec(&[2, 7, 5], (0..70).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let grid = grid_generate(&TransformParams::new(0.63, 0.1, 0.71, -0.05), 6, 4).unwrap();
        let up = Tensor::new(&[2, 6, 4], 0.75).unwrap();
        let (gi, _) = bilinear_backward(&img, &grid, &up, true).unwrap();
        assert!((gi.unwrap().sum_f64() - up.sum_f64()).abs() < 1e-12);
    }

    #[test]
    fn crop_theta_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = Tensor::from_vec(
            &[3, 160, 64],
            (0..3 * 160 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let mean = move |th: &[f64], img: &Tensor<f64>| {
            let c = crop_part(img, &TransformParams::from_array([th[0], th[1], th[2], th[3]])).unwrap();
            c.sum_f64() / c.len() as f64
        };
        let img2 = img.clone();
        let mut probe = FnProbe {
            x: vec![0.4137, 0.0213, 0.3871, 0.5919],
            f: |th: &[f64]| mean(th, &img),
            grad: move |th: &[f64]| {
                let up = Tensor::new(&[3, 96, 64], 1.0 / (3.0 * 96.0 * 64.0)).unwrap();
                let th = TransformParams::from_array([th[0], th[1], th[2], th[3]]);
                crop_part_theta_gradient(&img2, &th, &up).unwrap().to_array().to_vec()
            },
        };
        let r = finite_difference_check(&mut probe, CheckOptions { eps: 1e-6, ..Default::default() }, &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn bias_initialised_head_emits_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let priors = PartPrior::defaults();
        let mut head = LocalizationHead::<f32>::new(10, &priors, 0.5, &mut rng).unwrap();
        head.fc_loc.weight.value.fill(0.0);
        let x = Tensor::from_vec(&[2, 10], (0..20).map(|i| i as f32).collect()).unwrap();
        let th = head.forward(&x, &mut rng).unwrap();
        for s in 0..2 {
            for (k, p) in priors.iter().enumerate() {
                let t = th[s][k];
                assert!((t.sx - 0.4).abs() < 1e-7 && (t.sy - 0.4).abs() < 1e-7);
                assert_eq!((t.tx, t.ty), (p.cx as f32 as f64, p.cy as f32 as f64));
            }
        }
        assert_eq!(th[0].len(), 3);
        assert!(LocalizationHead::<f32>::new(10, &priors[..2], 0.5, &mut rng).is_err());
    }
}
