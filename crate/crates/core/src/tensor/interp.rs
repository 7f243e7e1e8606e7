//! Bilinear resizing and point sampling.

use super::{Real, Resize};
use crate::counter;

/// Interpolation taps along one axis: `(i0, i1, frac)`.
fn axis_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn resized_extent(len: usize, factor: Resize) -> usize {
    match factor {
        Resize::Up2 => len * 2,
        Resize::Down2 => len / 2,
    }
}

/// Resizes `c` planes of `h x w` into `out`.
pub(crate) fn resize_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: Resize,
    out: &mut [T],
) {
    let (oh, ow) = (resized_extent(h, factor), resized_extent(w, factor));
    counter::add_macs((4 * c * oh * ow) as u64);
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
}

pub(crate) fn resize_backward<T: Real>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: Resize,
    dx: &mut [T],
) {
    let (oh, ow) = (resized_extent(h, factor), resized_extent(w, factor));
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = g[oy * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                d[y0 * w + x0] += top * (T::one() - fx);
                d[y0 * w + x1] += top * fx;
                d[y1 * w + x0] += bot * (T::one() - fx);
                d[y1 * w + x1] += bot * fx;
            }
        }
    }
}

/// Clamped bilinear tap at a real-valued `(u, v)` = (row, col) location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct SamplePoint<T> {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub fy: T,
    pub fx: T,
    /// Whether the coordinate lies inside the clamp range (so it carries a
    /// gradient).
    pub live_y: bool,
    pub live_x: bool,
}

fn clamp_axis<T: Real>(u: T, len: usize) -> (usize, usize, T, bool) {
    let hi = T::lit((len - 1) as f64);
    let live = u >= T::zero() && u <= hi;
    let uc = u.max(T::zero()).min(hi);
    let i0 = uc.floor().to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, uc - T::lit(i0 as f64), live)
}

pub(crate) fn sample_point<T: Real>(u: T, v: T, h: usize, w: usize) -> SamplePoint<T> {
    let (y0, y1, fy, live_y) = clamp_axis(u, h);
    let (x0, x1, fx, live_x) = clamp_axis(v, w);
    SamplePoint {
        y0,
        y1,
        x0,
        x1,
        fy,
        fx,
        live_y,
        live_x,
    }
}

impl<T: Real> SamplePoint<T> {
    #[inline]
    pub fn interpolate(&self, plane: &[T], w: usize) -> T {
        let one = T::one();
        let top = plane[self.y0 * w + self.x0] * (one - self.fx) + plane[self.y0 * w + self.x1] * self.fx;
        let bot = plane[self.y1 * w + self.x0] * (one - self.fx) + plane[self.y1 * w + self.x1] * self.fx;
        top * (one - self.fy) + bot * self.fy
    }

    /// Scatters `g` onto the four taps.
    #[inline]
    fn scatter(&self, g: T, plane: &mut [T], w: usize) {
        let one = T::one();
        let top = g * (one - self.fy);
        let bot = g * self.fy;
        plane[self.y0 * w + self.x0] += top * (one - self.fx);
        plane[self.y0 * w + self.x1] += top * self.fx;
        plane[self.y1 * w + self.x0] += bot * (one - self.fx);
        plane[self.y1 * w + self.x1] += bot * self.fx;
    }

    /// Derivatives of the interpolated value w.r.t. `(u, v)`.
    #[inline]
    fn coord_grad(&self, plane: &[T], w: usize) -> (T, T) {
        let one = T::one();
        let a = plane[self.y0 * w + self.x0];
        let b = plane[self.y0 * w + self.x1];
        let c = plane[self.y1 * w + self.x0];
        let d = plane[self.y1 * w + self.x1];
        let du = if self.live_y {
            ((c - a) * (one - self.fx) + (d - b) * self.fx) * T::lit((self.y1 - self.y0) as f64)
        } else {
            T::zero()
        };
        let dv = if self.live_x {
            ((b - a) * (one - self.fy) + (d - c) * self.fy) * T::lit((self.x1 - self.x0) as f64)
        } else {
            T::zero()
        };
        (du, dv)
    }
}

/// Geometry shared by the sampling kernels: `features` is `(C, H, W)`,
/// `offsets` is `(2k, H, W)` and the output is `(k, C, H, W)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SampleGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl SampleGeom {
    fn point<T: Real>(&self, offsets: &[T], i: usize, y: usize, x: usize) -> SamplePoint<T> {
        let hw = self.h * self.w;
        let dx = offsets[(2 * i) * hw + y * self.w + x];
        let dy = offsets[(2 * i + 1) * hw + y * self.w + x];
        sample_point(
            T::lit(y as f64) + dy,
            T::lit(x as f64) + dx,
            self.h,
            self.w,
        )
    }
}

pub(crate) fn sample_forward<T: Real>(g: &SampleGeom, features: &[T], offsets: &[T], out: &mut [T]) {
    counter::add_macs((4 * g.k * g.c * g.h * g.w) as u64);
    counter::add_sample_points((g.k * g.h * g.w) as u64);
    let hw = g.h * g.w;
    for i in 0..g.k {
        for y in 0..g.h {
            for x in 0..g.w {
                let p = g.point(offsets, i, y, x);
                for ch in 0..g.c {
                    out[((i * g.c + ch) * g.h + y) * g.w + x] =
                        p.interpolate(&features[ch * hw..(ch + 1) * hw], g.w);
                }
            }
        }
    }
}

pub(crate) fn sample_backward<T: Real>(
    g: &SampleGeom,
    features: &[T],
    offsets: &[T],
    dy: &[T],
    mut dfeat: Option<&mut [T]>,
    mut doff: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    for i in 0..g.k {
        for y in 0..g.h {
            for x in 0..g.w {
                let p = g.point(offsets, i, y, x);
                let (mut gu, mut gv) = (T::zero(), T::zero());
                for ch in 0..g.c {
                    let gout = dy[((i * g.c + ch) * g.h + y) * g.w + x];
                    let plane = &features[ch * hw..(ch + 1) * hw];
                    if let Some(df) = dfeat.as_deref_mut() {
                        p.scatter(gout, &mut df[ch * hw..(ch + 1) * hw], g.w);
                    }
                    if doff.is_some() {
                        let (du, dv) = p.coord_grad(plane, g.w);
                        gu += gout * du;
                        gv += gout * dv;
                    }
                }
                if let Some(d) = doff.as_deref_mut() {
                    d[(2 * i) * hw + y * g.w + x] += gv;
                    d[(2 * i + 1) * hw + y * g.w + x] += gu;
                }
            }
        }
    }
}
