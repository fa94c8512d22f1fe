//! Minimal dense-array substrate: channel-major feature maps, per-position
//! linear maps (1x1 convolution), a stable 9-way softmax, and the binary
//! dump/load format used by oracle cross-checks.
//!
//! Layout is channel-major (`c`, then row `i`, then column `j`) so the
//! eight-neighbor kernel can read whole per-position channel vectors with a
//! fixed stride. Verification paths run in `f64`; the benchmark path uses
//! `f32` through the same generic code.

use std::io::{Read, Write};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element of a feature map. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + num_traits::FromPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Dtype code stored in binary headers.
    const DTYPE: u8;
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, buf: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 4;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 2;
    const BYTES: usize = 8;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense rank-3 array of shape `channels x height x width` in channel-major
/// layout: `data[(c * height + i) * width + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar = f64> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty feature map");
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "feature map data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Build from a per-element function of `(c, i, j)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut m = Self::zeros(channels, height, width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    m.set(c, i, j, f(c, i, j));
                }
            }
        }
        m
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        debug_assert!(c < self.channels && i < self.height && j < self.width);
        (c * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[self.idx(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: T) {
        let k = self.idx(c, i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn add_at(&mut self, c: usize, i: usize, j: usize, v: T) {
        let k = self.idx(c, i, j);
        self.data[k] = self.data[k] + v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Elementwise `self + scale * other`.
    pub fn axpy(&mut self, scale: T, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Dimension("axpy shape mismatch".into()));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in self.data.iter_mut() {
            *v = *v * s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_precision<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// A 1x1 convolution: per-position linear map from `in_channels` to
/// `out_channels`, with bias. Gradients accumulate into `weight_grad` /
/// `bias_grad` (single writer).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProjection<T: Scalar = f64> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Row-major `out_channels x in_channels`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub weight_grad: Vec<T>,
    pub bias_grad: Vec<T>,
}

impl<T: Scalar> LinearProjection<T> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![T::zero(); out_channels * in_channels],
            bias: vec![T::zero(); out_channels],
            weight_grad: vec![T::zero(); out_channels * in_channels],
            bias_grad: vec![T::zero(); out_channels],
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels, channels);
        for c in 0..channels {
            p.weight[c * channels + c] = T::one();
        }
        p
    }

    pub fn from_parts(in_channels: usize, out_channels: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weight.len() != out_channels * in_channels || bias.len() != out_channels {
            return Err(Error::Dimension(format!(
                "projection parts do not match {}->{}",
                in_channels, out_channels
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            weight_grad: vec![T::zero(); weight.len()],
            bias_grad: vec![T::zero(); bias.len()],
            weight,
            bias,
        })
    }

    #[inline]
    pub fn w(&self, out_c: usize, in_c: usize) -> T {
        self.weight[out_c * self.in_channels + in_c]
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.iter_mut().for_each(|g| *g = T::zero());
        self.bias_grad.iter_mut().for_each(|g| *g = T::zero());
    }

    /// SGD step on the accumulated gradients.
    pub fn sgd_step(&mut self, lr: T) {
        for (w, g) in self.weight.iter_mut().zip(self.weight_grad.iter()) {
            *w = *w - lr * *g;
        }
        for (b, g) in self.bias.iter_mut().zip(self.bias_grad.iter()) {
            *b = *b - lr * *g;
        }
    }

    /// Merge gradients accumulated in another (thread-local) copy.
    pub fn absorb_grads(&mut self, other: &Self) {
        for (g, o) in self.weight_grad.iter_mut().zip(other.weight_grad.iter()) {
            *g = *g + *o;
        }
        for (g, o) in self.bias_grad.iter_mut().zip(other.bias_grad.iter()) {
            *g = *g + *o;
        }
    }

    pub fn map_precision<U: Scalar>(&self) -> LinearProjection<U> {
        let conv = |v: &Vec<T>| -> Vec<U> {
            v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect()
        };
        LinearProjection {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weight: conv(&self.weight),
            bias: conv(&self.bias),
            weight_grad: vec![U::zero(); self.weight.len()],
            bias_grad: vec![U::zero(); self.bias.len()],
        }
    }
}

/// Apply a 1x1 convolution: `out[c,i,j] = bias[c] + sum_k weight[c,k] * x[k,i,j]`.
///
/// Height and width are preserved exactly. Accumulation runs over input
/// channels in ascending order so results are bit-reproducible against the
/// naive per-pixel oracle.
pub fn project<T: Scalar>(p: &LinearProjection<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if x.channels != p.in_channels {
        return Err(Error::Dimension(format!(
            "project: input has {} channels, projection expects {}",
            x.channels, p.in_channels
        )));
    }
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    let mut out = FeatureMap::zeros(p.out_channels, h, w);
    for c in 0..p.out_channels {
        let row = &p.weight[c * p.in_channels..(c + 1) * p.in_channels];
        let dst = &mut out.data[c * plane..(c + 1) * plane];
        dst.iter_mut().for_each(|v| *v = p.bias[c]);
        for (k, &wk) in row.iter().enumerate() {
            let src = &x.data[k * plane..(k + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = *d + wk * s;
            }
        }
    }
    Ok(out)
}

/// Backward of [`project`]: given the output gradient, accumulate weight and
/// bias gradients into `p` and return the input gradient.
pub fn project_backward<T: Scalar>(
    p: &mut LinearProjection<T>,
    x: &FeatureMap<T>,
    d_out: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    if x.channels != p.in_channels || d_out.channels != p.out_channels {
        return Err(Error::Dimension("project_backward channel mismatch".into()));
    }
    if d_out.height != x.height || d_out.width != x.width {
        return Err(Error::Dimension("project_backward spatial mismatch".into()));
    }
    let plane = x.height * x.width;
    let mut d_x = FeatureMap::zeros(x.channels, x.height, x.width);
    for c in 0..p.out_channels {
        let g_plane = &d_out.data[c * plane..(c + 1) * plane];
        let mut g_sum = T::zero();
        for &g in g_plane {
            g_sum = g_sum + g;
        }
        p.bias_grad[c] = p.bias_grad[c] + g_sum;
        for k in 0..p.in_channels {
            let x_plane = &x.data[k * plane..(k + 1) * plane];
            let mut acc = T::zero();
            for (&g, &xv) in g_plane.iter().zip(x_plane.iter()) {
                acc = acc + g * xv;
            }
            let wi = c * p.in_channels + k;
            p.weight_grad[wi] = p.weight_grad[wi] + acc;
            let wk = p.weight[wi];
            let dst = &mut d_x.data[k * plane..(k + 1) * plane];
            for (d, &g) in dst.iter_mut().zip(g_plane.iter()) {
                *d = *d + wk * g;
            }
        }
    }
    Ok(d_x)
}

/// Numerically stable softmax over the nine neighbor scores.
///
/// The maximum is subtracted before exponentiation; outputs are nonnegative
/// and sum to one.
pub fn softmax9<T: Scalar>(v: &[T; 9]) -> [T; 9] {
    let mut m = v[0];
    for &x in v.iter().skip(1) {
        if x > m {
            m = x;
        }
    }
    let mut out = [T::zero(); 9];
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(v.iter()) {
        let e = (x - m).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    out
}

/// Gradient of [`softmax9`]: `d_logits[n] = p[n] * (d_p[n] - sum_m d_p[m] p[m])`.
pub fn softmax9_backward<T: Scalar>(p: &[T; 9], d_p: &[T; 9]) -> [T; 9] {
    let mut dot = T::zero();
    for n in 0..9 {
        dot = dot + d_p[n] * p[n];
    }
    let mut out = [T::zero(); 9];
    for n in 0..9 {
        out[n] = p[n] * (d_p[n] - dot);
    }
    out
}

// ---------------------------------------------------------------------------
// Binary dump/load. A "PFM1" block is: magic, dtype code (1 = f32, 2 = f64),
// u32 LE C/H/W, then raw little-endian values in channel-major order.
// ---------------------------------------------------------------------------

pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"PFM1";

pub(crate) fn write_block<T: Scalar, W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    dims: (usize, usize, usize),
    data: &[T],
) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 1 + 12 + data.len() * T::BYTES);
    buf.extend_from_slice(magic);
    buf.push(T::DTYPE);
    for d in [dims.0, dims.1, dims.2] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn read_block<T: Scalar, R: Read>(
    r: &mut R,
    magic: &[u8; 4],
) -> Result<(usize, usize, usize, Vec<T>)> {
    let head = read_exact_vec(r, 17)?;
    if &head[0..4] != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    if head[4] != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype code {} does not match requested element type",
            head[4]
        )));
    }
    let dim = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(5), dim(9), dim(13));
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let raw = read_exact_vec(r, n * T::BYTES)?;
    let mut data = Vec::with_capacity(n);
    for chunk in raw.chunks_exact(T::BYTES) {
        let v = T::read_le(chunk);
        if !v.is_finite() {
            return Err(Error::Format("non-finite value in binary block".into()));
        }
        data.push(v);
    }
    Ok((c, h, w, data))
}

impl<T: Scalar> FeatureMap<T> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_block(w, FEATURE_MAP_MAGIC, (self.channels, self.height, self.width), &self.data)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (c, h, w, data) = read_block(r, FEATURE_MAP_MAGIC)?;
        FeatureMap::from_vec(c, h, w, data)
    }
}

impl<T: Scalar> LinearProjection<T> {
    /// Serialized as two consecutive PFM1 blocks: the weight as an
    /// `out x in x 1` map, then the bias as `out x 1 x 1`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_block(w, FEATURE_MAP_MAGIC, (self.out_channels, self.in_channels, 1), &self.weight)?;
        write_block(w, FEATURE_MAP_MAGIC, (self.out_channels, 1, 1), &self.bias)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (out_c, in_c, one, weight) = read_block(r, FEATURE_MAP_MAGIC)?;
        if one != 1 {
            return Err(Error::Format("projection weight block must be OxIx1".into()));
        }
        let (b_out, b_h, b_w, bias) = read_block(r, FEATURE_MAP_MAGIC)?;
        if b_out != out_c || b_h != 1 || b_w != 1 {
            return Err(Error::Format("projection bias block shape mismatch".into()));
        }
        LinearProjection::from_parts(in_c, out_c, weight, bias)
    }
}
