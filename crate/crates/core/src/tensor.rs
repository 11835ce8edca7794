//! Multi-channel feature arrays, reshaping, norms and small convolutions.
//!
//! Everything here is dense row-major `f64`. A [`FeatureMap`] is laid out as
//! `data[(c * height + y) * width + x]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};

/// Which encoder branch a feature map belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Reference (visible) branch.
    FiducialX,
    /// Infrared branch, remodeled against the fiducial branch.
    ComplementaryY,
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub branch: Branch,
    pub scale: usize,
}

impl FeatureMap {
    /// Builds a validated feature map. Every dimension must be positive and
    /// every entry finite.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        branch: Branch,
        scale: usize,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "feature map entry {i} is not finite"
            )));
        }
        Ok(Self::from_parts(channels, height, width, data, branch, scale))
    }

    pub(crate) fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        branch: Branch,
        scale: usize,
    ) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
            branch,
            scale,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize, branch: Branch, scale: usize) -> Self {
        Self::from_parts(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
            branch,
            scale,
        )
    }

    /// Fills a map from `f(c, y, x)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        branch: Branch,
        scale: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_parts(channels, height, width, data, branch, scale)
    }

    /// Uniform random entries in `[-1, 1)`.
    pub fn random<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(channels, height, width, Branch::FiducialX, 0, |_, _, _| {
            rng.random_range(-1.0..1.0)
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn with_tags(mut self, branch: Branch, scale: usize) -> Self {
        self.branch = branch;
        self.scale = scale;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Elementwise `self + other`, keeping `self`'s tags.
    pub fn add(&self, other: &FeatureMap) -> Result<Self> {
        self.check_same_dims(other, "add")?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(out)
    }

    pub(crate) fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.dims(), other.dims());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn check_same_dims(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Stacks maps with equal spatial dims along the channel axis.
    pub fn concat_channels(maps: &[&FeatureMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::shape("concat of zero feature maps"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            if (m.height, m.width) != (h, w) {
                return Err(Error::shape(format!(
                    "concat: spatial {}x{} vs {}x{}",
                    m.height, m.width, h, w
                )));
            }
            channels += m.channels;
            data.extend_from_slice(&m.data);
        }
        Ok(Self::from_parts(channels, h, w, data, first.branch, first.scale))
    }

    /// Splits channels into consecutive blocks of the given sizes.
    pub(crate) fn split_channels(&self, sizes: &[usize]) -> Vec<FeatureMap> {
        debug_assert_eq!(sizes.iter().sum::<usize>(), self.channels);
        let p = self.plane();
        let mut at = 0;
        sizes
            .iter()
            .map(|&n| {
                let block = self.data[at * p..(at + n) * p].to_vec();
                at += n;
                Self::from_parts(n, self.height, self.width, block, self.branch, self.scale)
            })
            .collect()
    }
}

/// A `C x L` matrix of sub-features, one row per channel, with the spatial
/// dims it was rasterized from.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatFeature {
    rows: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FlatFeature {
    pub fn new(rows: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || width == 0 || height == 0 {
            return Err(Error::shape("flat feature dims must be positive"));
        }
        if data.len() != rows * width * height {
            return Err(Error::shape(format!(
                "flat feature ({rows}, {}) needs {} values, got {}",
                width * height,
                rows * width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("flat feature has non-finite entry".into()));
        }
        Ok(Self::from_parts(rows, width, height, data))
    }

    pub(crate) fn from_parts(rows: usize, width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * width * height);
        Self {
            rows,
            width,
            height,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Row length `L = W * H`.
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let l = self.len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }
}

/// Row-major raster of each channel.
pub fn flatten_spatial(f: &FeatureMap) -> FlatFeature {
    FlatFeature::from_parts(f.channels, f.width, f.height, f.data.clone())
}

/// Inverse of [`flatten_spatial`]. The result is tagged as a fiducial map at
/// scale 0; callers retag as needed.
pub fn unflatten(f: &FlatFeature, width: usize, height: usize) -> Result<FeatureMap> {
    if width * height != f.len() || width == 0 || height == 0 {
        return Err(Error::shape(format!(
            "cannot unflatten rows of length {} into {width}x{height}",
            f.len()
        )));
    }
    Ok(FeatureMap::from_parts(
        f.rows,
        height,
        width,
        f.data.clone(),
        Branch::FiducialX,
        0,
    ))
}

/// Per-channel infinity norms.
#[derive(Clone, Debug, PartialEq)]
pub struct NormVector {
    pub values: Vec<f64>,
}

impl NormVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn channel_inf_norm(f: &FlatFeature) -> NormVector {
    NormVector {
        values: (0..f.rows)
            .map(|c| f.row(c).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect(),
    }
}

/// Infinity norms together with the column achieving each maximum (first
/// occurrence).
pub(crate) fn channel_inf_norm_argmax(f: &FlatFeature) -> (NormVector, Vec<usize>) {
    let mut values = Vec::with_capacity(f.rows);
    let mut arg = Vec::with_capacity(f.rows);
    for c in 0..f.rows {
        let (mut best, mut at) = (-1.0f64, 0);
        for (i, v) in f.row(c).iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                at = i;
            }
        }
        values.push(best);
        arg.push(at);
    }
    (NormVector { values }, arg)
}

/// Convolution weights `(c_out, c_in, k, k)` and a bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet {
    c_out: usize,
    c_in: usize,
    k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl KernelSet {
    pub fn new(c_out: usize, c_in: usize, k: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if ![1, 3, 5, 7].contains(&k) {
            return Err(Error::config(format!("kernel size {k} not in {{1, 3, 5, 7}}")));
        }
        if c_out == 0 || c_in == 0 {
            return Err(Error::config("kernel channel counts must be positive"));
        }
        if weights.len() != c_out * c_in * k * k || bias.len() != c_out {
            return Err(Error::shape(format!(
                "kernel ({c_out}, {c_in}, {k}, {k}) got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("kernel has non-finite entry".into()));
        }
        Ok(Self {
            c_out,
            c_in,
            k,
            weights,
            bias,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        assert!([1, 3, 5, 7].contains(&k), "kernel size {k} not in {{1, 3, 5, 7}}");
        Self {
            c_out,
            c_in,
            k,
            weights: vec![0.0; c_out * c_in * k * k],
            bias: vec![0.0; c_out],
        }
    }

    /// Kaiming-uniform weights for a ReLU fan-in of `c_in * k * k`, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        let mut ks = Self::zeros(c_out, c_in, k);
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        ks.weights
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..bound));
        ks
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + i) * self.k + ky) * self.k + kx
    }

    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.index(o, i, ky, kx)]
    }

    pub fn weight_mut(&mut self, o: usize, i: usize, ky: usize, kx: usize) -> &mut f64 {
        let at = self.index(o, i, ky, kx);
        &mut self.weights[at]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c_out, self.c_in, self.k)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2`, preserving spatial size at stride 1.
    #[default]
    SameZero,
}

/// Stride-1 "same" convolution (cross-correlation).
pub fn conv2d(f: &FeatureMap, k: &KernelSet, padding: Padding) -> Result<FeatureMap> {
    let Padding::SameZero = padding;
    conv2d_strided(f, k, 1)
}

/// Zero-padded convolution with the given stride; output dims are
/// `ceil(H / stride) x ceil(W / stride)`.
pub fn conv2d_strided(f: &FeatureMap, k: &KernelSet, stride: usize) -> Result<FeatureMap> {
    Ok(conv2d_forward(f, k, stride)?.0)
}

/// Saved im2col buffer from a forward convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvCache {
    cols: Vec<f64>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
    stride: usize,
}

fn out_size(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Unrolls input patches into a `(c_in * k * k) x (out_h * out_w)` matrix.
fn im2col(f: &FeatureMap, k: usize, stride: usize, oh: usize, ow: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let (c_in, h, w) = f.dims();
    let p = oh * ow;
    let mut cols = vec![0.0; c_in * k * k * p];
    for c in 0..c_in {
        let src = f.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds an im2col-shaped gradient back onto the input grid.
fn col2im(
    dcols: &[f64],
    in_dims: (usize, usize, usize),
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let (c_in, h, w) = in_dims;
    let p = oh * ow;
    let mut out = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &dcols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, g) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward(
    f: &FeatureMap,
    k: &KernelSet,
    stride: usize,
) -> Result<(FeatureMap, ConvCache)> {
    if k.c_in != f.channels {
        return Err(Error::shape(format!(
            "conv2d: kernel expects {} input channels, map has {}",
            k.c_in, f.channels
        )));
    }
    if stride == 0 {
        return Err(Error::config("conv2d stride must be positive"));
    }
    let (oh, ow) = (out_size(f.height, stride), out_size(f.width, stride));
    let p = oh * ow;
    let cols = if k.k == 1 && stride == 1 {
        f.data.clone()
    } else {
        im2col(f, k.k, stride, oh, ow)
    };
    let mut out = vec![0.0; k.c_out * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(k.bias[o]);
    }
    gemm(
        k.c_out,
        k.c_in * k.k * k.k,
        p,
        &k.weights,
        Op::N,
        &cols,
        Op::N,
        1.0,
        &mut out,
    );
    let map = FeatureMap::from_parts(k.c_out, oh, ow, out, f.branch, f.scale);
    Ok((
        map,
        ConvCache {
            cols,
            in_dims: f.dims(),
            out_hw: (oh, ow),
            stride,
        },
    ))
}

/// Gradients of a convolution with respect to its input and parameters.
pub(crate) fn conv2d_backward(
    k: &KernelSet,
    cache: &ConvCache,
    grad_out: &FeatureMap,
    need_input: bool,
) -> (Option<Vec<f64>>, KernelSet) {
    let (oh, ow) = cache.out_hw;
    let p = oh * ow;
    let ckk = k.c_in * k.k * k.k;
    debug_assert_eq!(grad_out.data.len(), k.c_out * p);
    let mut grad = k.zeros_like();
    gemm(
        k.c_out,
        p,
        ckk,
        &grad_out.data,
        Op::N,
        &cache.cols,
        Op::T,
        0.0,
        &mut grad.weights,
    );
    for (o, row) in grad_out.data.chunks(p).enumerate() {
        grad.bias[o] = row.iter().sum();
    }
    let grad_in = need_input.then(|| {
        let mut dcols = vec![0.0; ckk * p];
        gemm(
            ckk,
            k.c_out,
            p,
            &k.weights,
            Op::T,
            &grad_out.data,
            Op::N,
            0.0,
            &mut dcols,
        );
        if k.k == 1 && cache.stride == 1 {
            dcols
        } else {
            col2im(&dcols, cache.in_dims, k.k, cache.stride, oh, ow)
        }
    });
    (grad_in, grad)
}

/// Zero-padded 1-D correlation: `out[j] = sum_t kernel[t] * v_padded[j + t] + bias`.
pub fn conv1d(v: &[f64], kernel: &[f64], bias: f64) -> Result<Vec<f64>> {
    if kernel.len() % 2 == 0 {
        return Err(Error::config(format!(
            "conv1d kernel length must be odd, got {}",
            kernel.len()
        )));
    }
    let pad = (kernel.len() / 2) as isize;
    let n = v.len() as isize;
    Ok((0..n)
        .map(|j| {
            let mut acc = bias;
            for (t, kt) in kernel.iter().enumerate() {
                let at = j + t as isize - pad;
                if (0..n).contains(&at) {
                    acc += kt * v[at as usize];
                }
            }
            acc
        })
        .collect())
}

/// Backward pass of [`conv1d`]: `(d_v, d_kernel, d_bias)`.
pub(crate) fn conv1d_backward(v: &[f64], kernel: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let pad = (kernel.len() / 2) as isize;
    let n = v.len() as isize;
    let mut dv = vec![0.0; v.len()];
    let mut dk = vec![0.0; kernel.len()];
    for j in 0..n {
        let g = grad_out[j as usize];
        for (t, kt) in kernel.iter().enumerate() {
            let at = j + t as isize - pad;
            if (0..n).contains(&at) {
                dk[t] += g * v[at as usize];
                dv[at as usize] += g * kt;
            }
        }
    }
    (dv, dk, grad_out.iter().sum())
}

pub(crate) fn relu_inplace(f: &mut FeatureMap) {
    f.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` by the positive part of the post-ReLU activation.
pub(crate) fn relu_backward_inplace(grad: &mut FeatureMap, activated: &FeatureMap) {
    grad.data
        .iter_mut()
        .zip(&activated.data)
        .for_each(|(g, a)| {
            if *a <= 0.0 {
                *g = 0.0;
            }
        });
}

/// Compares an analytic gradient against central differences.
///
/// Returns `max_i |analytic_i - fd_i| / max(1, |fd_i|)` where
/// `fd_i = (L(p + eps e_i) - L(p - eps e_i)) / (2 eps)`.
pub fn fd_grad_check<F>(mut loss_fn: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let base = loss_fn(params);
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss {
            coordinate: usize::MAX,
            value: base,
        });
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = loss_fn(&p);
        p[i] = orig - eps;
        let minus = loss_fn(&p);
        p[i] = orig;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { coordinate: i, value });
            }
        }
        let fd = (plus - minus) / (2.0 * eps);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
