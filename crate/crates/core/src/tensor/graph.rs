//! Define-by-run reverse-mode differentiation.
//!
//! Every op call evaluates eagerly and appends a node to the tape. Calling
//! [`Graph::backward`] walks the tape in reverse and leaves the gradient of
//! every trainable leaf in that leaf's [`Tensor::grad`] buffer.

use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::ConvGeom;
use super::interp::{resized_extent, SampleGeom};
use super::softmax::AttnGeom;
use super::{layout, Real, Resize, Tensor};
use crate::error::{shape_err, Error, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Identity(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu(Var, T),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Vec<(Var, usize)>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Resize {
        x: Var,
        factor: Resize,
        c: usize,
        h: usize,
        w: usize,
    },
    Sample {
        f: Var,
        o: Var,
        geom: SampleGeom,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        scale: T,
        weights: Vec<T>,
    },
    PixelShuffle {
        x: Var,
        r: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    Nearest {
        x: Var,
        r: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    Softmax(Var, T),
    SmoothL1 {
        pred: Var,
        target: Var,
        beta: T,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded tensor operations.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::State(format!(
                "variable {v:?} was not recorded on this graph"
            )));
        }
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.index].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an input. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.check(v).expect("variable belongs to this graph").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.check(v)?.value)
    }

    /// Gradient left on a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.check(v).ok()?.value.grad()
    }

    /// Moves a node's value out of the graph.
    pub fn take(mut self, v: Var) -> Tensor<T> {
        self.check(v).expect("variable belongs to this graph");
        std::mem::replace(&mut self.nodes[v.index].value, Tensor::zeros(&[0]))
    }

    pub fn identity(&mut self, x: Var) -> Result<Var> {
        let value = self.check(x)?.value.clone();
        Ok(self.push(value, Op::Identity(x), &[x]))
    }

    /// Batched, grouped "same" convolution. `x` is `(C,H,W)` or `(N,C,H,W)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let xd = self.check(x)?.value.dims().to_vec();
        let geom = ConvGeom::from_dims(&xd, self.check(w)?.value.dims(), groups)?;
        if let Some(b) = b {
            let bd = self.check(b)?.value.dims();
            if bd != [geom.cout] {
                return shape_err(format!("bias {bd:?} for {} output channels", geom.cout));
            }
        }
        let mut dims = xd.clone();
        let rank = dims.len();
        dims[rank - 3] = geom.cout;
        let mut out = Tensor::zeros(&dims);
        super::conv2d_forward(
            &geom,
            self.nodes[x.index].value.data(),
            self.nodes[w.index].value.data(),
            b.map(|b| self.nodes[b.index].value.data()),
            out.data_mut(),
        );
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let out = super::leaky_relu(&self.check(x)?.value, slope);
        Ok(self.push(out, Op::LeakyRelu(x, slope), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.check(a)?.value, &self.check(b)?.value);
        if va.dims() != vb.dims() {
            return shape_err(format!("add {:?} + {:?}", va.dims(), vb.dims()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_vec_unchecked(va.dims(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.check(x)?.value.map(|v| v * s);
        Ok(self.push(out, Op::Scale(x, s), &[x]))
    }

    /// Channel concatenation of rank-3 tensors with equal spatial extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let (_, h, w) = self.check(parts[0])?.value.chw()?;
        let mut data = Vec::new();
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.check(p)?.value;
            let (c, ph, pw) = v.chw()?;
            if (ph, pw) != (h, w) {
                return shape_err(format!("concat spatial mismatch {:?} vs ({h},{w})", v.dims()));
            }
            data.extend_from_slice(v.data());
            meta.push((p, c));
        }
        let total = meta.iter().map(|m| m.1).sum::<usize>();
        let out = Tensor::from_vec_unchecked(&[total, h, w], data)?;
        Ok(self.push(out, Op::Concat(meta), parts))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.check(x)?.value.channels(start, len)?;
        Ok(self.push(out, Op::Slice { x, start, len }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.check(x)?.value.clone().reshape(dims)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn resize(&mut self, x: Var, factor: Resize) -> Result<Var> {
        let v = &self.check(x)?.value;
        let (c, h, w) = v.chw()?;
        if factor == Resize::Down2 && (h % 2 != 0 || w % 2 != 0) {
            return shape_err(format!("cannot downsample odd extents {h}x{w}"));
        }
        let (oh, ow) = (resized_extent(h, factor), resized_extent(w, factor));
        let mut out = Tensor::zeros(&[c, oh, ow]);
        super::resize_forward(v.data(), c, h, w, factor, out.data_mut());
        Ok(self.push(out, Op::Resize { x, factor, c, h, w }, &[x]))
    }

    /// Samples `(C,H,W)` features at `k` displaced points per pixel given a
    /// `(2k,H,W)` offset field; produces `(k,C,H,W)`.
    pub fn sample(&mut self, features: Var, offsets: Var) -> Result<Var> {
        let (c, h, w) = self.check(features)?.value.chw()?;
        let (oc, oh, ow) = self.check(offsets)?.value.chw()?;
        if (oh, ow) != (h, w) {
            return shape_err(format!(
                "offsets at {oh}x{ow} but features at {h}x{w}"
            ));
        }
        if oc == 0 || oc % 2 != 0 {
            return shape_err(format!("offset field needs 2k channels, got {oc}"));
        }
        let geom = SampleGeom { c, h, w, k: oc / 2 };
        let mut out = Tensor::zeros(&[geom.k, c, h, w]);
        super::sample_forward(
            &geom,
            self.nodes[features.index].value.data(),
            self.nodes[offsets.index].value.data(),
            out.data_mut(),
        );
        Ok(self.push(
            out,
            Op::Sample {
                f: features,
                o: offsets,
                geom,
            },
            &[features, offsets],
        ))
    }

    /// Grouped softmax attention; see [`super::attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, scale: T) -> Result<Var> {
        let geom = AttnGeom::from_dims(
            self.check(q)?.value.dims(),
            self.check(k)?.value.dims(),
            self.check(v)?.value.dims(),
            groups,
        )?;
        let mut out = Tensor::zeros(&[geom.cv, geom.h, geom.w]);
        let mut weights = vec![T::zero(); groups * geom.k * geom.h * geom.w];
        super::attention_forward(
            &geom,
            self.nodes[q.index].value.data(),
            self.nodes[k.index].value.data(),
            self.nodes[v.index].value.data(),
            scale,
            out.data_mut(),
            &mut weights,
        );
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                scale,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights `(groups,k,H,W)` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Result<Tensor<T>> {
        match &self.check(v)?.op {
            Op::Attention { geom, weights, .. } => Tensor::from_vec_unchecked(
                &[geom.groups, geom.k, geom.h, geom.w],
                weights.clone(),
            ),
            _ => Err(Error::Contract("node is not an attention op".into())),
        }
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let v = &self.check(x)?.value;
        let (cr, h, w) = v.chw()?;
        if r == 0 || cr % (r * r) != 0 {
            return shape_err(format!("{cr} channels not divisible by {r}^2"));
        }
        let c = cr / (r * r);
        let mut out = Tensor::zeros(&[c, h * r, w * r]);
        layout::pixel_shuffle_into(v.data(), c, h, w, r, out.data_mut());
        Ok(self.push(out, Op::PixelShuffle { x, r, c, h, w }, &[x]))
    }

    pub fn nearest_upsample(&mut self, x: Var, r: usize) -> Result<Var> {
        let v = &self.check(x)?.value;
        let (c, h, w) = v.chw()?;
        if r == 0 {
            return shape_err("upsampling factor 0");
        }
        let mut out = Tensor::zeros(&[c, h * r, w * r]);
        layout::nearest_into(v.data(), c, h, w, r, out.data_mut());
        Ok(self.push(out, Op::Nearest { x, r, c, h, w }, &[x]))
    }

    /// Softmax over all elements of a rank-1 tensor.
    pub fn softmax(&mut self, x: Var, scale: T) -> Result<Var> {
        let v = &self.check(x)?.value;
        if v.rank() != 1 {
            return shape_err(format!("softmax expects a vector, got {:?}", v.dims()));
        }
        let out = Tensor::from_vec_unchecked(v.dims(), super::softmax(v.data(), scale))?;
        Ok(self.push(out, Op::Softmax(x, scale), &[x]))
    }

    /// Mean smooth-L1 loss, a scalar.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: T) -> Result<Var> {
        let (p, t) = (&self.check(pred)?.value, &self.check(target)?.value);
        if p.dims() != t.dims() {
            return shape_err(format!("smooth_l1 {:?} vs {:?}", p.dims(), t.dims()));
        }
        let half = T::lit(0.5);
        let sum: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let e = (a - b).abs();
                if e < beta {
                    half * e * e / beta
                } else {
                    e - half * beta
                }
            })
            .sum();
        let out = Tensor::scalar(sum / T::lit(p.len() as f64));
        Ok(self.push(out, Op::SmoothL1 { pred, target, beta }, &[pred, target]))
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let n = self.check(out)?.value.len();
        if n != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar output, node has {n} elements"
            )));
        }
        self.backward_with(out, vec![T::one()])
    }

    /// Backpropagates an arbitrary cotangent `seed` from `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<T>) -> Result<()> {
        let node = self.check(out)?;
        if seed.len() != node.value.len() {
            return shape_err(format!(
                "seed of length {} for output {:?}",
                seed.len(),
                node.value.dims()
            ));
        }
        if !node.needs_grad {
            return Err(Error::State(
                "output does not depend on any trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.index).map(|_| None).collect();
        grads[out.index] = Some(seed);
        for i in (0..=out.index).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.set_grad(gy)?;
                continue;
            }
            for (var, g) in self.local_grads(i, &gy) {
                match &mut grads[var.index] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.nodes[v.index].value.len()]
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.index].value.data()
    }

    /// Vector-Jacobian products of node `i` for each input that needs one.
    fn local_grads(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut res = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Identity(x) | Op::Reshape(x) => {
                if self.wants(*x) {
                    res.push((*x, gy.to_vec()));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.wants(*x).then(|| self.zeros_like(*x));
                let mut dw = self.wants(*w).then(|| self.zeros_like(*w));
                let mut db = b.filter(|b| self.wants(*b)).map(|b| self.zeros_like(b));
                super::conv2d_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                res.extend(dx.map(|g| (*x, g)));
                res.extend(dw.map(|g| (*w, g)));
                if let (Some(b), Some(g)) = (b, db) {
                    res.push((*b, g));
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.wants(*x) {
                    let g = self
                        .data(*x)
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| if v > T::zero() { g } else { g * *slope })
                        .collect();
                    res.push((*x, g));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        res.push((*v, gy.to_vec()));
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    res.push((*x, gy.iter().map(|&g| g * *s).collect()));
                }
            }
            Op::Concat(parts) => {
                let plane = {
                    let d = self.nodes[i].value.dims();
                    d[1] * d[2]
                };
                let mut off = 0;
                for &(v, c) in parts {
                    if self.wants(v) {
                        res.push((v, gy[off * plane..(off + c) * plane].to_vec()));
                    }
                    off += c;
                }
            }
            Op::Slice { x, start, len } => {
                if self.wants(*x) {
                    let d = self.nodes[x.index].value.dims();
                    let plane = d[1] * d[2];
                    let mut g = self.zeros_like(*x);
                    g[start * plane..(start + len) * plane].copy_from_slice(gy);
                    res.push((*x, g));
                }
            }
            Op::Resize { x, factor, c, h, w } => {
                if self.wants(*x) {
                    let mut g = self.zeros_like(*x);
                    super::resize_backward(gy, *c, *h, *w, *factor, &mut g);
                    res.push((*x, g));
                }
            }
            Op::Sample { f, o, geom } => {
                let mut df = self.wants(*f).then(|| self.zeros_like(*f));
                let mut doff = self.wants(*o).then(|| self.zeros_like(*o));
                super::sample_backward(
                    geom,
                    self.data(*f),
                    self.data(*o),
                    gy,
                    df.as_deref_mut(),
                    doff.as_deref_mut(),
                );
                res.extend(df.map(|g| (*f, g)));
                res.extend(doff.map(|g| (*o, g)));
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                scale,
                weights,
            } => {
                let mut dq = self.wants(*q).then(|| self.zeros_like(*q));
                let mut dk = self.wants(*k).then(|| self.zeros_like(*k));
                let mut dv = self.wants(*v).then(|| self.zeros_like(*v));
                super::attention_backward(
                    geom,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    weights,
                    *scale,
                    gy,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                res.extend(dq.map(|g| (*q, g)));
                res.extend(dk.map(|g| (*k, g)));
                res.extend(dv.map(|g| (*v, g)));
            }
            Op::PixelShuffle { x, r, c, h, w } => {
                if self.wants(*x) {
                    let mut g = self.zeros_like(*x);
                    layout::pixel_shuffle_backward(gy, *c, *h, *w, *r, &mut g);
                    res.push((*x, g));
                }
            }
            Op::Nearest { x, r, c, h, w } => {
                if self.wants(*x) {
                    let mut g = self.zeros_like(*x);
                    layout::nearest_backward(gy, *c, *h, *w, *r, &mut g);
                    res.push((*x, g));
                }
            }
            Op::Softmax(x, scale) => {
                if self.wants(*x) {
                    let y = self.nodes[i].value.data();
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    let g = y.iter().zip(gy).map(|(&yi, &gi)| *scale * yi * (gi - dot)).collect();
                    res.push((*x, g));
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                let n = T::lit(self.data(*pred).len() as f64);
                let g0 = gy[0] / n;
                let de: Vec<T> = self
                    .data(*pred)
                    .iter()
                    .zip(self.data(*target))
                    .map(|(&a, &b)| {
                        let e = a - b;
                        let d = if e.abs() < *beta { e / *beta } else { e.signum() };
                        d * g0
                    })
                    .collect();
                if self.wants(*target) {
                    res.push((*target, de.iter().map(|&v| -v).collect()));
                }
                if self.wants(*pred) {
                    res.push((*pred, de));
                }
            }
        }
        res
    }
}
