//! Dense tensors and the differentiable kernels the model is built from.
//!
//! Layout is row-major and channel-first: a frame is `(C, H, W)`, a batch of
//! frames (or the `k` sampled copies of a feature map) is `(N, C, H, W)`.

use std::fmt::Debug;

use crate::error::{shape_err, Error, Result};

mod conv;
pub mod gradcheck;
mod graph;
mod interp;
mod layout;
pub mod rten;
mod softmax;

pub use graph::{Graph, Var};

pub(crate) use conv::{conv2d_backward, conv2d_forward};
pub(crate) use interp::{
    resize_backward, resize_forward, sample_backward, sample_forward, sample_point,
};
pub(crate) use softmax::{attention_backward, attention_forward, AttnGeom};

/// Scalar element type of a [`Tensor`]. Implemented for `f32` (the engine
/// precision) and `f64` (used to check gradients tightly).
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping
    /// `m x k`, `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense rank-0..=4 array with an optional gradient buffer of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting bad shapes and non-finite values.
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec_unchecked(dims, data)?;
        t.check_finite("tensor")?;
        Ok(t)
    }

    /// Like [`Tensor::new`] but skips the finiteness scan. Shape is still
    /// validated.
    pub fn from_vec_unchecked(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.len() > 4 {
            return shape_err(format!("rank {} exceeds 4", dims.len()));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        assert!(dims.len() <= 4, "rank {} exceeds 4", dims.len());
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = dims.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Self {
            dims: dims.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return shape_err(format!(
                "gradient of length {} for tensor {:?}",
                grad.len(),
                self.dims
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a scalar (single element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor {:?}", self.dims);
        self.data[0]
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!("expected (C,H,W), got {:?}", self.dims)),
        }
    }

    /// `(N, C, H, W)`, treating a rank-3 tensor as a batch of one.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((1, c, h, w)),
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(format!("expected (N,C,H,W), got {:?}", self.dims)),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = self.chw().expect("rank-3 tensor");
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() || dims.len() > 4 {
            return shape_err(format!("cannot reshape {:?} to {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Rejects NaN and infinite entries, naming `what` in the error.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value at flat index {i}"
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Channel slice `[start, start+len)` of a `(C,H,W)` tensor.
    pub fn channels(&self, start: usize, len: usize) -> Result<Self> {
        let (c, h, w) = self.chw()?;
        if start + len > c {
            return shape_err(format!("channel slice {start}+{len} of {c}"));
        }
        let plane = h * w;
        Ok(Self {
            dims: vec![len, h, w],
            data: self.data[start * plane..(start + len) * plane].to_vec(),
            grad: None,
        })
    }
}

/// Activation fused after a convolution.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    LeakyRelu,
}

/// Slope used by every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Parameterization of one "same"-padded convolution layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub has_bias: bool,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            has_bias: true,
            activation: Activation::None,
        }
    }

    pub fn leaky(mut self) -> Self {
        self.activation = Activation::LeakyRelu;
        self
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h % 2 == 0 || self.kernel_w % 2 == 0 {
            return shape_err(format!(
                "kernel {}x{} must have odd extents",
                self.kernel_h, self.kernel_w
            ));
        }
        Ok(())
    }
}

/// Bilinear resize direction; both change each spatial extent by 2x.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Up2,
    Down2,
}

/// "Same"-padded cross-correlation with optional bias and activation.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if weights.dims() != spec.weight_dims() {
        return shape_err(format!(
            "weights {:?} do not match spec {:?}",
            weights.dims(),
            spec.weight_dims()
        ));
    }
    if spec.has_bias != bias.is_some() {
        return Err(Error::Contract("bias presence must match ConvSpec".into()));
    }
    input.check_finite("conv2d input")?;
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let wv = g.constant(weights.clone());
    let bv = bias.map(|b| g.constant(b.clone()));
    let mut y = g.conv2d(x, wv, bv, 1)?;
    if spec.activation == Activation::LeakyRelu {
        y = g.leaky_relu(y, T::lit(LEAKY_SLOPE))?;
    }
    Ok(g.take(y))
}

/// Elementwise `max(x, slope * x)` for `slope` in (0, 1).
pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Align-corners-false bilinear resize by a factor of two.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, factor: Resize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.resize(v, factor)?;
    Ok(g.take(y))
}

/// Bilinearly interpolates every channel of `x` at each `(u, v)` = (row, col)
/// point. Coordinates are clamped to the image before interpolation. The
/// result has one row of `C` values per point.
pub fn bilinear_sample<T: Real>(x: &Tensor<T>, points: &[(T, T)]) -> Result<Vec<Vec<T>>> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    Ok(points
        .iter()
        .map(|&(u, v)| {
            let tap = sample_point(u, v, h, w);
            (0..c)
                .map(|ch| tap.interpolate(&x.data()[ch * plane..(ch + 1) * plane], w))
                .collect()
        })
        .collect())
}

/// Sub-pixel rearrangement `(C*r*r, H, W) -> (C, rH, rW)`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.pixel_shuffle(v, r)?;
    Ok(g.take(y))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return shape_err(format!("cannot unshuffle {:?} by {r}", x.dims()));
    }
    let mut out = Tensor::zeros(&[c * r * r, h / r, w / r]);
    layout::pixel_unshuffle_into(x.data(), c, h / r, w / r, r, out.data_mut());
    Ok(out)
}

/// Pixel replication by an integer factor.
pub fn nearest_upsample<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.nearest_upsample(v, r)?;
    Ok(g.take(y))
}

/// `exp(scale * l_i - max) / sum`, computed in a numerically stable way.
pub fn softmax<T: Real>(logits: &[T], scale: T) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    softmax::softmax_into(logits, scale, &mut out);
    out
}

/// Grouped dot-product attention over `k` candidates per pixel.
///
/// `q` is `(Dq, H, W)`, `keys` is `(k, Dq, H, W)` and `values` is
/// `(k, Cv, H, W)`. Channels are split into `groups` contiguous slices; each
/// group runs its own softmax over the `k` candidates. Returns the aggregated
/// values `(Cv, H, W)` and the attention weights `(groups, k, H, W)`.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    groups: usize,
    scale: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let geom = AttnGeom::from_dims(q.dims(), keys.dims(), values.dims(), groups)?;
    let mut out = Tensor::zeros(&[geom.cv, geom.h, geom.w]);
    let mut weights = Tensor::zeros(&[groups, geom.k, geom.h, geom.w]);
    attention_forward(
        &geom,
        q.data(),
        keys.data(),
        values.data(),
        scale,
        out.data_mut(),
        weights.data_mut(),
    );
    Ok((out, weights))
}

/// Samples `features` at `k = offsets.channels / 2` displaced locations per
/// pixel. Offsets are `(dx, dy)` pairs in pixels of the feature grid; the
/// result is `(k, C, H, W)`.
pub fn sample_kv<T: Real>(features: &Tensor<T>, offsets: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let o = g.constant(offsets.clone());
    let y = g.sample(f, o)?;
    Ok(g.take(y))
}

/// Channel-wise concatenation of `(C_i, H, W)` tensors.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = parts.iter().map(|p| g.constant((*p).clone())).collect();
    let y = g.concat(&vars)?;
    Ok(g.take(y))
}

#[cfg(test)]
mod tests;
