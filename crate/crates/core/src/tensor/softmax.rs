use super::Real;
use crate::counter;
use crate::error::{shape_err, Result};

pub(crate) fn softmax_into<T: Real>(logits: &[T], scale: T, out: &mut [T]) {
    let max = logits
        .iter()
        .map(|&l| l * scale)
        .fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l * scale - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Shapes for grouped attention: queries `(dq, h, w)`, keys `(k, dq, h, w)`,
/// values `(k, cv, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnGeom {
    pub dq: usize,
    pub cv: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub groups: usize,
}

impl AttnGeom {
    pub fn from_dims(q: &[usize], keys: &[usize], values: &[usize], groups: usize) -> Result<Self> {
        let [dq, h, w] = q[..] else {
            return shape_err(format!("queries must be (D,H,W), got {q:?}"));
        };
        let [k, dk, kh, kw] = keys[..] else {
            return shape_err(format!("keys must be (k,D,H,W), got {keys:?}"));
        };
        let [kv, cv, vh, vw] = values[..] else {
            return shape_err(format!("values must be (k,C,H,W), got {values:?}"));
        };
        if dk != dq || (kh, kw) != (h, w) || (vh, vw) != (h, w) || kv != k {
            return shape_err(format!(
                "attention shapes disagree: q {q:?}, keys {keys:?}, values {values:?}"
            ));
        }
        if groups == 0 || dq % groups != 0 || cv % groups != 0 {
            return shape_err(format!(
                "{groups} groups do not divide query dim {dq} and value dim {cv}"
            ));
        }
        Ok(Self {
            dq,
            cv,
            k,
            h,
            w,
            groups,
        })
    }

    /// Multiply-accumulates: `k` query-key products and `k` weighted value
    /// terms per channel and pixel.
    pub fn macs(&self) -> u64 {
        (self.k * (self.dq + self.cv) * self.h * self.w) as u64
    }

    /// One exponential and one division per candidate, group and pixel.
    pub fn softmax_ops(&self) -> u64 {
        (self.k * self.groups * self.h * self.w) as u64
    }
}

/// Writes aggregated values into `out` `(cv,h,w)` and the softmax weights into
/// `weights` `(groups,k,h,w)`.
pub(crate) fn attention_forward<T: Real>(
    g: &AttnGeom,
    q: &[T],
    keys: &[T],
    values: &[T],
    scale: T,
    out: &mut [T],
    weights: &mut [T],
) {
    counter::add_macs(g.macs());
    counter::add_exps(g.softmax_ops());
    counter::add_divs(g.softmax_ops());
    let hw = g.h * g.w;
    let qs = g.dq / g.groups;
    let vs = g.cv / g.groups;
    let mut logits = vec![T::zero(); g.k];
    let mut wts = vec![T::zero(); g.k];
    for p in 0..hw {
        for grp in 0..g.groups {
            for (i, l) in logits.iter_mut().enumerate() {
                let mut acc = T::zero();
                for c in grp * qs..(grp + 1) * qs {
                    acc += q[c * hw + p] * keys[(i * g.dq + c) * hw + p];
                }
                *l = acc;
            }
            softmax_into(&logits, scale, &mut wts);
            for (i, &wt) in wts.iter().enumerate() {
                weights[(grp * g.k + i) * hw + p] = wt;
            }
            for c in grp * vs..(grp + 1) * vs {
                let mut acc = T::zero();
                for (i, &wt) in wts.iter().enumerate() {
                    acc += wt * values[(i * g.cv + c) * hw + p];
                }
                out[c * hw + p] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    g: &AttnGeom,
    q: &[T],
    keys: &[T],
    values: &[T],
    weights: &[T],
    scale: T,
    dy: &[T],
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    let qs = g.dq / g.groups;
    let vs = g.cv / g.groups;
    let mut dw = vec![T::zero(); g.k];
    for p in 0..hw {
        for grp in 0..g.groups {
            let wt = |i: usize| weights[(grp * g.k + i) * hw + p];
            for (i, dwi) in dw.iter_mut().enumerate() {
                let mut acc = T::zero();
                for c in grp * vs..(grp + 1) * vs {
                    let gout = dy[c * hw + p];
                    acc += gout * values[(i * g.cv + c) * hw + p];
                    if let Some(dv) = dv.as_deref_mut() {
                        dv[(i * g.cv + c) * hw + p] += wt(i) * gout;
                    }
                }
                *dwi = acc;
            }
            let mean: T = (0..g.k).map(|i| wt(i) * dw[i]).sum();
            for (i, &dwi) in dw.iter().enumerate() {
                let dlogit = wt(i) * (dwi - mean) * scale;
                for c in grp * qs..(grp + 1) * qs {
                    let kidx = (i * g.dq + c) * hw + p;
                    if let Some(dq) = dq.as_deref_mut() {
                        dq[c * hw + p] += dlogit * keys[kidx];
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        dk[kidx] += dlogit * q[c * hw + p];
                    }
                }
            }
        }
    }
}
