use super::Real;
use crate::counter;
use crate::error::{shape_err, Result};

/// Upper bound on elements of one im2col tile.
const TILE_ELEMS: usize = 1 << 20;

/// Geometry of a batched, grouped, "same"-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn from_dims(input: &[usize], weight: &[usize], groups: usize) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return shape_err(format!("conv2d input must be rank 3 or 4, got {input:?}")),
        };
        let [cout, cin_g, kh, kw] = weight[..] else {
            return shape_err(format!("conv2d weight must be rank 4, got {weight:?}"));
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return shape_err(format!(
                "{groups} groups do not divide {cin} in / {cout} out channels"
            ));
        }
        if cin / groups != cin_g {
            return shape_err(format!(
                "weight {weight:?} expects {} input channels per group, input has {cin} in {groups} groups",
                cin_g
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("kernel {kh}x{kw} must have odd extents"));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            groups,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the im2col matrix for one group.
    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_ELEMS / (self.patch() * self.w).max(1)).clamp(1, self.h)
    }

    /// Nominal multiply-accumulates, counting padded taps.
    pub fn macs(&self) -> u64 {
        (self.n * self.cin_g() * self.cout * self.kh * self.kw * self.h * self.w) as u64
    }
}

/// Writes the im2col block for rows `[y0, y1)` of one group's input planes.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], y0: usize, y1: usize, col: &mut [T]) {
    let (h, w) = (g.h as isize, g.w);
    let ph = (g.kh / 2) as isize;
    let pw = (g.kw / 2) as isize;
    let cols = (y1 - y0) * w;
    for ci in 0..g.cin_g() {
        let plane = &x[ci * g.h * w..(ci + 1) * g.h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let dx = kx as isize - pw;
                for (ty, y) in (y0..y1).enumerate() {
                    let sy = y as isize + ky as isize - ph;
                    let out = &mut dst[ty * w..(ty + 1) * w];
                    if sy < 0 || sy >= h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let lo = ((-dx).max(0) as usize).min(w);
                    let hi = ((w as isize - dx).min(w as isize).max(0) as usize).max(lo);
                    out[..lo].fill(T::zero());
                    if hi > lo {
                        let s0 = (lo as isize + dx) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                    out[hi..].fill(T::zero());
                }
            }
        }
    }
}

/// `dst[c * rows + r] = src[r * stride + c]` for an `rows x cols` block.
fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, stride: usize, dst: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * stride + c];
                }
            }
        }
    }
}

/// `out = conv(x, weight) + bias`; `out` is overwritten.
pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    counter::add_macs(g.macs());
    conv_compute(g, x, weight, bias, out);
}

/// Input-gradient geometry and weights: a stride-1 "same" convolution's
/// adjoint is the convolution of `dy` with the spatially flipped, per-group
/// transposed kernel.
fn adjoint<T: Real>(g: &ConvGeom, weight: &[T]) -> (ConvGeom, Vec<T>) {
    let (cin_g, cout_g, kk) = (g.cin_g(), g.cout_g(), g.kh * g.kw);
    let mut flipped = vec![T::zero(); weight.len()];
    for grp in 0..g.groups {
        for co in 0..cout_g {
            for ci in 0..cin_g {
                let src = ((grp * cout_g + co) * cin_g + ci) * kk;
                let dst = ((grp * cin_g + ci) * cout_g + co) * kk;
                for t in 0..kk {
                    flipped[dst + kk - 1 - t] = weight[src + t];
                }
            }
        }
    }
    let geom = ConvGeom {
        cin: g.cout,
        cout: g.cin,
        ..*g
    };
    (geom, flipped)
}

fn conv_compute<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let hw = g.h * g.w;
    let (cin_g, cout_g, patch) = (g.cin_g(), g.cout_g(), g.patch());
    let rows = g.rows_per_tile();
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * rows * g.w]
    };
    for b in 0..g.n {
        for grp in 0..g.groups {
            let xin = &x[(b * g.cin + grp * cin_g) * hw..(b * g.cin + (grp + 1) * cin_g) * hw];
            let wg = &weight[grp * cout_g * patch..(grp + 1) * cout_g * patch];
            let out_base = (b * g.cout + grp * cout_g) * hw;
            let og = &mut out[out_base..out_base + cout_g * hw];
            if g.pointwise() {
                // SAFETY: wg is cout_g x cin_g, xin is cin_g x hw, og is cout_g x hw.
                unsafe {
                    T::gemm(
                        cout_g,
                        cin_g,
                        hw,
                        T::one(),
                        wg.as_ptr(),
                        cin_g as isize,
                        1,
                        xin.as_ptr(),
                        hw as isize,
                        1,
                        T::zero(),
                        og.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
            } else {
                let mut y0 = 0;
                while y0 < g.h {
                    let y1 = (y0 + rows).min(g.h);
                    let cols = (y1 - y0) * g.w;
                    im2col(g, xin, y0, y1, &mut col[..patch * cols]);
                    // SAFETY: wg is cout_g x patch, col is patch x cols, the
                    // output tile starts at column y0*w with row stride hw.
                    unsafe {
                        T::gemm(
                            cout_g,
                            patch,
                            cols,
                            T::one(),
                            wg.as_ptr(),
                            patch as isize,
                            1,
                            col.as_ptr(),
                            cols as isize,
                            1,
                            T::zero(),
                            og.as_mut_ptr().add(y0 * g.w),
                            hw as isize,
                            1,
                        );
                    }
                    y0 = y1;
                }
            }
            if let Some(bias) = bias {
                for (co, plane) in og.chunks_exact_mut(hw).enumerate() {
                    let bv = bias[grp * cout_g + co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients for [`conv2d_forward`].
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    let (cin_g, cout_g, patch) = (g.cin_g(), g.cout_g(), g.patch());
    let rows = g.rows_per_tile();
    let mut dx = dx;
    let mut dw = dw;

    if let Some(db) = db {
        for b in 0..g.n {
            for co in 0..g.cout {
                let plane = &dy[(b * g.cout + co) * hw..(b * g.cout + co + 1) * hw];
                db[co] += plane.iter().copied().sum::<T>();
            }
        }
    }

    let weight_sign = if crate::fault::conv_backward_flipped() {
        -T::one()
    } else {
        T::one()
    };

    let tile = if dw.is_some() { patch * rows * g.w } else { 0 };
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { tile }];
    let mut colt = vec![T::zero(); tile];
    for b in 0..g.n {
        for grp in 0..g.groups {
            let xin = &x[(b * g.cin + grp * cin_g) * hw..(b * g.cin + (grp + 1) * cin_g) * hw];
            let wg = &weight[grp * cout_g * patch..(grp + 1) * cout_g * patch];
            let dyg = &dy[(b * g.cout + grp * cout_g) * hw..(b * g.cout + (grp + 1) * cout_g) * hw];
            let mut y0 = 0;
            while y0 < g.h {
                let y1 = (y0 + rows).min(g.h);
                let cols = (y1 - y0) * g.w;
                let dyt = dyg[y0 * g.w..].as_ptr();
                if let Some(dw) = dw.as_deref_mut() {
                    let dwg = &mut dw[grp * cout_g * patch..(grp + 1) * cout_g * patch];
                    let colt = &mut colt[..cols * patch];
                    if g.pointwise() {
                        transpose(&xin[y0 * g.w..], patch, cols, hw, colt);
                    } else {
                        im2col(g, xin, y0, y1, &mut col[..patch * cols]);
                        transpose(&col[..patch * cols], patch, cols, cols, colt);
                    }
                    // SAFETY: dY tile is cout_g x cols (row stride hw), colt
                    // is cols x patch, dW is cout_g x patch.
                    unsafe {
                        T::gemm(
                            cout_g,
                            cols,
                            patch,
                            weight_sign,
                            dyt,
                            hw as isize,
                            1,
                            colt.as_ptr(),
                            patch as isize,
                            1,
                            T::one(),
                            dwg.as_mut_ptr(),
                            patch as isize,
                            1,
                        );
                    }
                }
                if let (Some(dx), true) = (dx.as_deref_mut(), g.pointwise()) {
                    let base = (b * g.cin + grp * cin_g) * hw;
                    let dxg = &mut dx[base..base + cin_g * hw];
                    // SAFETY: W^T is cin_g x cout_g, dY tile cout_g x cols,
                    // dX tile cin_g x cols with row stride hw.
                    unsafe {
                        T::gemm(
                            cin_g,
                            cout_g,
                            cols,
                            T::one(),
                            wg.as_ptr(),
                            1,
                            cin_g as isize,
                            dyt,
                            hw as isize,
                            1,
                            T::one(),
                            dxg.as_mut_ptr().add(y0 * g.w),
                            hw as isize,
                            1,
                        );
                    }
                }
                y0 = y1;
            }
        }
    }
    if let (Some(dx), false) = (dx, g.pointwise()) {
        let (ga, wa) = adjoint(g, weight);
        let mut tmp = vec![T::zero(); dx.len()];
        conv_compute(&ga, dy, &wa, None, &mut tmp);
        dx.iter_mut().zip(&tmp).for_each(|(d, &t)| *d += t);
    }
}
