use rand::Rng;
use rayon::prelude::*;

use super::{he_normal, join, Layer, Module, Param, ParamKind};
use crate::error::{Error, Result};
use crate::kernels::{dot_rows, mul_acc};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Output length of a stride-1 dilated convolution along one axis.
pub fn conv_output_len(len: usize, kernel: usize, dilation: usize, pad: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    (len + 2 * pad).checked_sub(span).map(|v| v + 1)
}

/// Stride-1 dilated 2-D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar = f32> {
    /// `[out_c, in_c, kh, kw]`
    pub weight: Param<T>,
    /// `[out_c]`
    pub bias: Param<T>,
    pub dilation: usize,
    pub pad: usize,
    input: Option<Tensor<T>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    in_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    dilation: usize,
    pad: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Output rows per im2col block, sized so one block stays cache resident.
    fn block_rows(&self) -> usize {
        const BLOCK_ELEMS: usize = 32 * 1024;
        (BLOCK_ELEMS / (self.k() * self.ow).max(1)).clamp(1, self.oh.max(1))
    }

    /// Unfold output rows `y0..y1` of one `[in_c, h, w]` sample into
    /// `[in_c*kh*kw, (y1-y0)*ow]`.
    fn im2col<T: Scalar>(&self, x: &[T], y0: usize, y1: usize, cols: &mut [T]) {
        let pb = (y1 - y0) * self.ow;
        for ci in 0..self.in_c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let dst = &mut cols[row * pb..(row + 1) * pb];
                    let dy = (a * self.dilation) as isize - self.pad as isize;
                    let dx = (b * self.dilation) as isize - self.pad as isize;
                    // valid output columns: 0 <= x + dx < w
                    let x_lo = (-dx).clamp(0, self.ow as isize) as usize;
                    let x_hi = (self.w as isize - dx).clamp(x_lo as isize, self.ow as isize) as usize;
                    if self.ow == self.w {
                        self.shifted_band(plane, y0, y1, dy, dx, x_lo, x_hi, dst);
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = y as isize + dy;
                        let out_row = &mut dst[(y - y0) * self.ow..(y - y0 + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out_row[..x_lo].fill(T::zero());
                        out_row[x_hi..].fill(T::zero());
                        if x_lo < x_hi {
                            let s0 = (x_lo as isize + dx) as usize;
                            out_row[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                        }
                    }
                }
            }
        }
    }

    /// One unfolded row for a shape-preserving convolution: output rows and
    /// input rows have the same width, so the whole band is a single shifted
    /// copy followed by zeroing the padded columns and rows.
    #[allow(clippy::too_many_arguments)]
    fn shifted_band<T: Scalar>(
        &self,
        plane: &[T],
        y0: usize,
        y1: usize,
        dy: isize,
        dx: isize,
        x_lo: usize,
        x_hi: usize,
        dst: &mut [T],
    ) {
        let w = self.w;
        let ya = (-dy).clamp(y0 as isize, y1 as isize) as usize;
        let yb = (self.h as isize - dy).clamp(ya as isize, y1 as isize) as usize;
        dst[..(ya - y0) * w].fill(T::zero());
        dst[(yb - y0) * w..].fill(T::zero());
        if ya == yb {
            return;
        }
        let off = (ya as isize + dy) * w as isize + dx;
        let (mut i0, mut i1) = ((ya - y0) * w, (yb - y0) * w);
        let base = off - (i0 as isize);
        i0 = i0.max((-base).max(0) as usize);
        i1 = i1.min((plane.len() as isize - base).max(0) as usize);
        if i0 < i1 {
            let s0 = (i0 as isize + base) as usize;
            dst[i0..i1].copy_from_slice(&plane[s0..s0 + (i1 - i0)]);
        }
        for row in dst[(ya - y0) * w..(yb - y0) * w].chunks_exact_mut(w) {
            row[..x_lo].fill(T::zero());
            row[x_hi..].fill(T::zero());
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-add a column block back onto the image.
    fn col2im<T: Scalar>(&self, cols: &[T], y0: usize, y1: usize, x: &mut [T]) {
        let pb = (y1 - y0) * self.ow;
        for ci in 0..self.in_c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let src = &cols[row * pb..(row + 1) * pb];
                    let dy = (a * self.dilation) as isize - self.pad as isize;
                    let dx = (b * self.dilation) as isize - self.pad as isize;
                    let x_lo = (-dx).clamp(0, self.ow as isize) as usize;
                    let x_hi = (self.w as isize - dx).clamp(x_lo as isize, self.ow as isize) as usize;
                    for y in y0..y1 {
                        let iy = y as isize + dy;
                        if iy < 0 || iy >= self.h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let s0 = (x_lo as isize + dx) as usize;
                        let dst = &mut plane[iy as usize * self.w + s0..iy as usize * self.w + s0 + (x_hi - x_lo)];
                        let src_row = &src[(y - y0) * self.ow + x_lo..(y - y0) * self.ow + x_hi];
                        for (d, &v) in dst.iter_mut().zip(src_row) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    /// He-initialised weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        dilation: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = he_normal(&[out_c, in_c, kernel, kernel], in_c * kernel * kernel, rng);
        Self::from_params(weight, Tensor::zeros(&[out_c]), dilation, pad).expect("consistent shapes")
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>, dilation: usize, pad: usize) -> Result<Self> {
        let [out_c, ..] = weight.dims4()?.dims();
        if bias.shape() != [out_c] {
            return Err(Error::ShapeMismatch(format!(
                "conv bias {:?} vs {out_c} filters",
                bias.shape()
            )));
        }
        if dilation == 0 {
            return Err(Error::InvalidShape("dilation must be >= 1".into()));
        }
        Ok(Self {
            weight: Param::new(weight, ParamKind::Weight),
            bias: Param::new(bias, ParamKind::Bias),
            dilation,
            pad,
            input: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Output `[n, out_c, oh, ow]` for a given input shape.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(self.geometry(input)?.1)
    }

    fn geometry(&self, input: Shape4) -> Result<(Geometry, Shape4)> {
        let [out_c, in_c, kh, kw] = self.weight.value.dims4()?.dims();
        if input.c != in_c {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {in_c} input channels, got {}",
                input.c
            )));
        }
        let oh = conv_output_len(input.h, kh, self.dilation, self.pad);
        let ow = conv_output_len(input.w, kw, self.dilation, self.pad);
        let (oh, ow) = match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "conv {kh}x{kw} dilation {} pad {} leaves no output on {}x{} input",
                    self.dilation, self.pad, input.h, input.w
                )))
            }
        };
        let geo = Geometry {
            in_c,
            h: input.h,
            w: input.w,
            kh,
            kw,
            oh,
            ow,
            dilation: self.dilation,
            pad: self.pad,
        };
        Ok((geo, Shape4::new(input.n, out_c, oh, ow)?))
    }

    fn backward_impl(&mut self, grad_out: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("conv backward called before forward".into()))?;
        let in_shape = input.dims4()?;
        let (geo, out_shape) = self.geometry(in_shape)?;
        if grad_out.shape() != out_shape.dims() {
            return Err(Error::ShapeMismatch(format!(
                "conv upstream gradient {:?} vs output {out_shape}",
                grad_out.shape()
            )));
        }
        let (k, p, oc) = (geo.k(), geo.p(), out_shape.c);
        let w = self.weight.value.data();
        let in_len = in_shape.sample_len();
        let out_len = out_shape.sample_len();

        let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..in_shape.n)
            .into_par_iter()
            .map_init(|| vec![T::zero(); k * geo.block_rows() * geo.ow], |cols, s| {
                let x = &input.data()[s * in_len..(s + 1) * in_len];
                let gy = &grad_out.data()[s * out_len..(s + 1) * out_len];
                let rb = geo.block_rows();
                let mut gw = vec![T::zero(); oc * k];
                let mut gx = want_input.then(|| vec![T::zero(); in_len]);
                for y0 in (0..geo.oh).step_by(rb) {
                    let y1 = (y0 + rb).min(geo.oh);
                    let pb = (y1 - y0) * geo.ow;
                    let cols = &mut cols[..k * pb];
                    let gy_blk = &gy[y0 * geo.ow..];
                    geo.im2col(x, y0, y1, cols);
                    // gw[oc, k] += gy[oc, pb] * cols[k, pb]^T
                    dot_rows(oc, k, pb, gy_blk, p, cols, pb, &mut gw, k);
                    if let Some(gx) = gx.as_mut() {
                        // dcols[k, pb] = w[oc, k]^T * gy[oc, pb]
                        mul_acc(k, pb, oc, w, (1, k), gy_blk, p, cols, pb, false);
                        geo.col2im(cols, y0, y1, gx);
                    }
                }
                let gb: Vec<T> = (0..oc).map(|o| gy[o * p..(o + 1) * p].iter().copied().sum()).collect();
                (gw, gb, gx)
            })
            .collect();

        let mut gx_all = want_input.then(|| Vec::with_capacity(in_shape.numel()));
        for (gw, gb, gx) in per_sample {
            for (acc, v) in self.weight.grad.data_mut().iter_mut().zip(gw) {
                *acc += v;
            }
            for (acc, v) in self.bias.grad.data_mut().iter_mut().zip(gb) {
                *acc += v;
            }
            if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
                all.extend(gx);
            }
        }
        gx_all
            .map(|d| Tensor::from_vec(&in_shape.dims(), d))
            .transpose()
    }

    /// Accumulate parameter gradients without forming the input gradient.
    pub fn backward_params(&mut self, grad_out: &Tensor<T>) -> Result<()> {
        self.backward_impl(grad_out, false).map(|_| ())
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let in_shape = input.dims4()?;
        let (geo, out_shape) = self.geometry(in_shape)?;
        let (k, p, oc) = (geo.k(), geo.p(), out_shape.c);
        let w = self.weight.value.data();
        let bias = self.bias.value.data();
        let in_len = in_shape.sample_len();
        let out_len = out_shape.sample_len();
        let mut out = vec![T::zero(); out_shape.numel()];
        let rb = geo.block_rows();
        out.par_chunks_mut(out_len).enumerate().for_each_init(|| vec![T::zero(); k * rb * geo.ow], |cols, (s, y)| {
            let x = &input.data()[s * in_len..(s + 1) * in_len];
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.fill(bias[o]);
            }
            for y0 in (0..geo.oh).step_by(rb) {
                let y1 = (y0 + rb).min(geo.oh);
                let pb = (y1 - y0) * geo.ow;
                let cols = &mut cols[..k * pb];
                geo.im2col(x, y0, y1, cols);
                let y_blk = &mut y[y0 * geo.ow..];
                mul_acc(oc, pb, k, w, (k, 1), cols, pb, y_blk, p, true);
            }
        });
        self.input = Some(input.clone());
        Tensor::from_vec(&out_shape.dims(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backward_impl(grad_out, true)?.expect("input gradient requested"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window evaluation of the convolution sum.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], d: usize, pad: usize) -> Tensor<f64> {
        let [n, c, h, wd] = x.dims4().unwrap().dims();
        let [oc, _, kh, kw] = w.dims4().unwrap().dims();
        let oh = h + 2 * pad - (d * (kh - 1) + 1) + 1;
        let ow = wd + 2 * pad - (d * (kw - 1) + 1) + 1;
        let mut out = Tensor::zeros(&[n, oc, oh, ow]);
        for s in 0..n {
            for o in 0..oc {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[o];
                        for i in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let iy = y as isize - pad as isize + (a * d) as isize;
                                    let ix = xx as isize - pad as isize + (bb * d) as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.data()[((o * c + i) * kh + a) * kw + bb]
                                            * x.data()[((s * c + i) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * oc + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_kernel_outputs_bias() {
        let mut conv = Conv2d::<f32>::from_params(
            Tensor::zeros(&[1, 1, 3, 3]),
            Tensor::new(&[1], 1.0).unwrap(),
            1,
            1,
        )
        .unwrap();
        let x = Tensor::new(&[1, 1, 4, 5], 3.0).unwrap();
        let y = conv.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dilated_branch_preserves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f32>::new(96, 32, 3, 2, 2, &mut rng);
        let out = conv.output_shape(Shape4::new(1, 96, 40, 16).unwrap()).unwrap();
        assert_eq!(out.chw(), (32, 40, 16));
        for d in 1..=3 {
            let c = Conv2d::<f32>::new(2, 2, 3, d, d, &mut rng);
            for (h, w) in [(1, 1), (5, 2), (7, 9)] {
                let s = c.output_shape(Shape4::new(1, 2, h, w).unwrap()).unwrap();
                assert_eq!((s.h, s.w), (h, w));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f32>::new(3, 2, 3, 1, 0, &mut rng);
        assert!(matches!(conv.forward(&Tensor::zeros(&[1, 2, 5, 5])), Err(Error::ShapeMismatch(_))));
        assert!(matches!(conv.forward(&Tensor::zeros(&[1, 3, 2, 5])), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 1, 5, 5], &mut rng);
        let w = random(&[1, 1, 3, 3], &mut rng);
        let mut conv = Conv2d::from_params(w.clone(), Tensor::zeros(&[1]), 2, 2).unwrap();
        let got = conv.forward(&x).unwrap();
        let want = naive_conv(&x, &w, &[0.0], 2, 2);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> - <b, sum g> == <x, conv^T g> for the linear part
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 6, 5], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let mut conv = Conv2d::from_params(w, Tensor::zeros(&[4]), 3, 2).unwrap();
        let y = conv.forward(&x).unwrap();
        let g = random(y.shape(), &mut rng);
        let gx = conv.backward(&g).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // weight gradient: <y, g> is linear in w too
        let gw: f64 = conv.weight.value.data().iter().zip(conv.weight.grad.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - gw).abs() < 1e-10);
    }
}
