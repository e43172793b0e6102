//! Dense row-major tensors and the handful of primitives the layers build on.
//!
//! Layout is channels-first: a batch of feature maps is `[n, c, h, w]`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Magic bytes of the binary tensor encoding.
pub const TENSOR_MAGIC: &[u8; 4] = b"MSCT";
/// Current version of the binary tensor encoding.
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Batch, channel, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!(
                "all of n,c,h,w must be >= 1, got {n}x{c}x{h}x{w}"
            )));
        }
        Ok(Self { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one sample (`c*h*w`).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// The `c x h x w` part, as printed in architecture tables.
    pub fn chw(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("shape must have at least one dimension".into()));
    }
    if let Some(d) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::InvalidShape(format!("dimension {d} in {shape:?} is not positive")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of the given shape with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    /// Zero tensor. Panics on an invalid shape; use [`Tensor::new`] for untrusted input.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, T::zero()).expect("valid shape")
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interpret as `[n, c, h, w]`.
    pub fn dims4(&self) -> Result<Shape4> {
        match self.shape[..] {
            [n, c, h, w] => Shape4::new(n, c, h, w),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interpret as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.data.len() / self.shape[0];
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Concatenate `[n, c_k, h, w]` tensors along the channel axis, in list order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidShape("concat of an empty list".into()))?
        .dims4()?;
    let mut dims = Vec::with_capacity(parts.len());
    for p in parts {
        let d = p.dims4()?;
        if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
            return Err(Error::ShapeMismatch(format!(
                "cannot concatenate {d} with {first} along channels"
            )));
        }
        dims.push(d);
    }
    let c: usize = dims.iter().map(|d| d.c).sum();
    let plane = first.h * first.w;
    let mut data = Vec::with_capacity(first.n * c * plane);
    for n in 0..first.n {
        for (p, d) in parts.iter().zip(&dims) {
            let block = d.c * plane;
            data.extend_from_slice(&p.data[n * block..(n + 1) * block]);
        }
    }
    Tensor::from_vec(&[first.n, c, first.h, first.w], data)
}

/// Channels `start..start+len` of an `[n, c, h, w]` tensor.
pub fn slice_channels<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let d = t.dims4()?;
    if len == 0 || start + len > d.c {
        return Err(Error::ShapeMismatch(format!(
            "channel slice {start}..{} outside {} channels",
            start + len,
            d.c
        )));
    }
    let plane = d.h * d.w;
    let mut data = Vec::with_capacity(d.n * len * plane);
    for n in 0..d.n {
        let base = (n * d.c + start) * plane;
        data.extend_from_slice(&t.data[base..base + len * plane]);
    }
    Tensor::from_vec(&[d.n, len, d.h, d.w], data)
}

/// Concatenate `[n, d_k]` matrices along columns.
pub fn concat_columns<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (rows, _) = parts
        .first()
        .ok_or_else(|| Error::InvalidShape("concat of an empty list".into()))?
        .dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != rows {
            return Err(Error::ShapeMismatch(format!("row counts {r} vs {rows}")));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
        }
    }
    Tensor::from_vec(&[rows, total], data)
}

/// Columns `start..start+len` of an `[n, d]` matrix.
pub fn slice_columns<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (rows, cols) = t.dims2()?;
    if len == 0 || start + len > cols {
        return Err(Error::ShapeMismatch(format!(
            "column slice {start}..{} outside {cols} columns",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&t.data[r * cols + start..r * cols + start + len]);
    }
    Tensor::from_vec(&[rows, len], data)
}

/// `out[n, o] = sum_i weights[o, i] * input[n, i] + bias[o]`.
pub fn matvec_affine<T: Scalar>(
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (out, inp) = weights.dims2()?;
    let (n, k) = input.dims2()?;
    if k != inp {
        return Err(Error::ShapeMismatch(format!(
            "weights expect {inp} inputs, input has {k}"
        )));
    }
    if bias.shape() != [out] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} does not match {out} outputs",
            bias.shape()
        )));
    }
    let mut data = Vec::with_capacity(n * out);
    for _ in 0..n {
        data.extend_from_slice(bias.data());
    }
    // out[n,o] += input[n,:] . weights[o,:]  (weights used transposed)
    T::gemm(
        n,
        k,
        out,
        T::one(),
        input.data(),
        (k as isize, 1),
        weights.data(),
        (1, k as isize),
        T::one(),
        &mut data,
        (out as isize, 1),
    );
    Tensor::from_vec(&[n, out], data)
}

const NORM_EPS: f64 = 1e-12;

fn normalize_slice<T: Scalar>(v: &[T]) -> Vec<T> {
    let norm = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    let denom = norm.max(NORM_EPS);
    v.iter().map(|&x| T::of(x.f64() / denom)).collect()
}

/// `v / max(||v||, 1e-12)`; the all-zero vector maps to itself.
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: v.shape.clone(),
        data: normalize_slice(&v.data),
    }
}

/// Row-wise [`l2_normalize`] of an `[n, d]` matrix.
pub fn l2_normalize_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = m.dims2()?;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.extend(normalize_slice(m.row(r)));
    }
    Tensor::from_vec(&[rows, cols], data)
}

impl Tensor<f32> {
    /// Binary encoding: magic, version, rank, little-endian `u32` dims, little-endian `f32` data.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[TENSOR_VERSION, self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + 4 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let corrupt = |what: &str| Error::CorruptCheckpoint(format!("tensor {what}"));
        let mut head = [0u8; 6];
        r.read_exact(&mut head).map_err(|_| corrupt("header truncated"))?;
        if &head[..4] != TENSOR_MAGIC {
            return Err(corrupt("magic mismatch"));
        }
        if head[4] != TENSOR_VERSION {
            return Err(Error::Version {
                found: head[4],
                expected: TENSOR_VERSION,
            });
        }
        let rank = head[5] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| corrupt("dims truncated"))?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let len = check_shape(&shape)?;
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(|_| corrupt("data truncated"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(&shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}
