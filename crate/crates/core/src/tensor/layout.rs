//! Pure data-movement kernels. None of these count multiply-accumulates.

use super::Real;

/// Index of the input element feeding output `(c, oy, ox)` of a pixel shuffle
/// from `(c*r*r, h, w)`.
#[inline]
fn shuffle_src(c: usize, oy: usize, ox: usize, h: usize, w: usize, r: usize) -> usize {
    let (y, i) = (oy / r, oy % r);
    let (x, j) = (ox / r, ox % r);
    ((c * r * r + i * r + j) * h + y) * w + x
}

pub(crate) fn pixel_shuffle_into<T: Real>(x: &[T], c: usize, h: usize, w: usize, r: usize, out: &mut [T]) {
    let (oh, ow) = (h * r, w * r);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(ch * oh + oy) * ow + ox] = x[shuffle_src(ch, oy, ox, h, w, r)];
            }
        }
    }
}

/// `out` is `(c*r*r, h, w)`, `x` is `(c, h*r, w*r)`.
pub(crate) fn pixel_unshuffle_into<T: Real>(x: &[T], c: usize, h: usize, w: usize, r: usize, out: &mut [T]) {
    let (oh, ow) = (h * r, w * r);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[shuffle_src(ch, oy, ox, h, w, r)] = x[(ch * oh + oy) * ow + ox];
            }
        }
    }
}

pub(crate) fn pixel_shuffle_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize, r: usize, dx: &mut [T]) {
    let (oh, ow) = (h * r, w * r);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[shuffle_src(ch, oy, ox, h, w, r)] += dy[(ch * oh + oy) * ow + ox];
            }
        }
    }
}

pub(crate) fn nearest_into<T: Real>(x: &[T], c: usize, h: usize, w: usize, r: usize, out: &mut [T]) {
    let (oh, ow) = (h * r, w * r);
    for ch in 0..c {
        for oy in 0..oh {
            let row = &x[(ch * h + oy / r) * w..(ch * h + oy / r + 1) * w];
            let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = row[ox / r];
            }
        }
    }
}

pub(crate) fn nearest_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize, r: usize, dx: &mut [T]) {
    let (oh, ow) = (h * r, w * r);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[(ch * h + oy / r) * w + ox / r] += dy[(ch * oh + oy) * ow + ox];
            }
        }
    }
}
