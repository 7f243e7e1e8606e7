//! Scalar-loop reference implementations in 64-bit arithmetic. Nothing here
//! calls into the engine's kernels; weights are only read by name.

#![allow(dead_code)]

use dap_core::tensor::Real;
use dap_core::{ModelConfig, ModelWeights, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(C, H, W)` array of f64.
#[derive(Clone, Debug)]
pub struct Arr {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Arr {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn from<T: Real>(t: &Tensor<T>) -> Self {
        let d = t.dims();
        let (c, h, w) = match d.len() {
            1 => (d[0], 1, 1),
            3 => (d[0], d[1], d[2]),
            4 => (d[0] * d[1], d[2], d[3]),
            _ => panic!("rank {} tensor", d.len()),
        };
        Self { c, h, w, v: t.data().iter().map(|x| x.as_f64()).collect() }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, val: f64) {
        self.v[(c * self.h + y) * self.w + x] = val;
    }

    pub fn channels(&self, start: usize, len: usize) -> Arr {
        let p = self.h * self.w;
        Arr { c: len, h: self.h, w: self.w, v: self.v[start * p..(start + len) * p].to_vec() }
    }

    pub fn concat(parts: &[&Arr]) -> Arr {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut v = Vec::new();
        for p in parts {
            assert_eq!((p.h, p.w), (h, w));
            v.extend_from_slice(&p.v);
        }
        Arr { c: v.len() / (h * w), h, w, v }
    }

    pub fn add(&self, o: &Arr) -> Arr {
        Arr { v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(), ..self.clone() }
    }
}

/// `max |a - b| / max |b|`, the error measure of the oracle comparisons.
pub fn rel_err<T: Real>(got: &Tensor<T>, want: &Arr) -> f64 {
    assert_eq!(got.len(), want.v.len(), "element counts differ");
    let scale = want.v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let diff = got
        .data()
        .iter()
        .zip(&want.v)
        .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b).abs()));
    diff / scale
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(dims, |_| r.gen_range(lo..hi))
}

pub fn rand_tensor64(r: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| r.gen_range(lo..hi))
}

/// Zero-padded "same" cross-correlation with `groups` channel groups.
pub fn conv(x: &Arr, weight: &Tensor, bias: &Tensor, groups: usize) -> Arr {
    conv_raw(x, &Arr::from(weight).v, weight.dims(), &Arr::from(bias).v, groups)
}

pub fn conv_raw(x: &Arr, wt: &[f64], wd: &[usize], b: &[f64], groups: usize) -> Arr {
    let (cout, cin_g, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    assert_eq!(cin_g * groups, x.c);
    let cout_g = cout / groups;
    let mut out = Arr::zeros(cout, x.h, x.w);
    for co in 0..cout {
        let g = co / cout_g;
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = b[co];
                for ci in 0..cin_g {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let sy = y as isize + ky as isize - (kh / 2) as isize;
                            let sx = xx as isize + kx as isize - (kw / 2) as isize;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            acc += x.at(g * cin_g + ci, sy as usize, sx as usize)
                                * wt[((co * cin_g + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out.set(co, y, xx, acc);
            }
        }
    }
    out
}

pub fn leaky(x: &Arr, slope: f64) -> Arr {
    Arr { v: x.v.iter().map(|&a| if a > 0.0 { a } else { a * slope }).collect(), ..x.clone() }
}

/// Named conv from a weight set, optionally followed by leaky ReLU.
pub fn layer(x: &Arr, w: &ModelWeights, name: &str, groups: usize, act: Option<f64>) -> Arr {
    let y = conv(x, w.get(&format!("{name}.weight")).unwrap(), w.get(&format!("{name}.bias")).unwrap(), groups);
    match act {
        Some(s) => leaky(&y, s),
        None => y,
    }
}

/// Bilinear value of channel `c` at row `u`, column `v`, with both
/// coordinates first clamped into the image.
pub fn bilinear(x: &Arr, c: usize, u: f64, v: f64) -> f64 {
    let u = u.clamp(0.0, (x.h - 1) as f64);
    let v = v.clamp(0.0, (x.w - 1) as f64);
    let (y0, x0) = (u.floor() as usize, v.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(x.h - 1), (x0 + 1).min(x.w - 1));
    let (fy, fx) = (u - y0 as f64, v - x0 as f64);
    let top = x.at(c, y0, x0) * (1.0 - fx) + x.at(c, y0, x1) * fx;
    let bot = x.at(c, y1, x0) * (1.0 - fx) + x.at(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// `k` arrays of `(C, H, W)`: features sampled at `(y + dy_i, x + dx_i)`.
pub fn sample_kv(f: &Arr, offsets: &Arr) -> Vec<Arr> {
    let k = offsets.c / 2;
    (0..k)
        .map(|i| {
            let mut out = Arr::zeros(f.c, f.h, f.w);
            for y in 0..f.h {
                for x in 0..f.w {
                    let dx = offsets.at(2 * i, y, x);
                    let dy = offsets.at(2 * i + 1, y, x);
                    for c in 0..f.c {
                        out.set(c, y, x, bilinear(f, c, y as f64 + dy, x as f64 + dx));
                    }
                }
            }
            out
        })
        .collect()
}

/// Grouped softmax attention over `k` candidates per pixel. Returns the
/// aggregated values and the weights `[group][candidate]` as arrays.
pub fn attention(q: &Arr, keys: &[Arr], values: &[Arr], groups: usize, scale: f64) -> (Arr, Vec<Vec<Arr>>) {
    let k = keys.len();
    let (dq, cv) = (q.c / groups, values[0].c / groups);
    let mut out = Arr::zeros(values[0].c, q.h, q.w);
    let mut weights = vec![vec![Arr::zeros(1, q.h, q.w); k]; groups];
    for g in 0..groups {
        for y in 0..q.h {
            for x in 0..q.w {
                let logits: Vec<f64> = (0..k)
                    .map(|j| (0..dq).map(|c| q.at(g * dq + c, y, x) * keys[j].at(g * dq + c, y, x)).sum::<f64>() * scale)
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for j in 0..k {
                    weights[g][j].set(0, y, x, e[j] / s);
                }
                for c in 0..cv {
                    let ch = g * cv + c;
                    let v: f64 = (0..k).map(|j| e[j] / s * values[j].at(ch, y, x)).sum();
                    out.set(ch, y, x, v);
                }
            }
        }
    }
    (out, weights)
}

/// Level attention: 1x1 query of `f_t`, 1x1 key and value embeddings of the
/// sampled `f_prev`.
pub fn attend_level(f_t: &Arr, f_prev: &Arr, offsets: &Arr, level: usize, w: &ModelWeights, cfg: &ModelConfig) -> Arr {
    let p = format!("dap.l{level}");
    let q = layer(f_t, w, &format!("{p}.q"), 1, None);
    let s = sample_kv(f_prev, offsets);
    let keys: Vec<Arr> = s.iter().map(|a| layer(a, w, &format!("{p}.k"), 1, None)).collect();
    let vals: Vec<Arr> = s.iter().map(|a| layer(a, w, &format!("{p}.v"), 1, None)).collect();
    attention(&q, &keys, &vals, cfg.groups, 1.0 / (cfg.d as f64).sqrt()).0
}

/// Hidden-state attention: dense key embedding, grouped value embedding.
pub fn fuse_hidden(q0: &Arr, h: &Arr, offsets: &Arr, w: &ModelWeights, cfg: &ModelConfig) -> Arr {
    let s = sample_kv(h, offsets);
    let keys: Vec<Arr> = s.iter().map(|a| layer(a, w, "hidden.k", 1, None)).collect();
    let vals: Vec<Arr> = s.iter().map(|a| layer(a, w, "hidden.v", cfg.groups, None)).collect();
    attention(q0, &keys, &vals, cfg.groups, 1.0 / (cfg.d as f64).sqrt()).0
}

/// Residual distillation block.
pub fn imdn(x: &Arr, w: &ModelWeights, prefix: &str, n: usize, slope: f64) -> Arr {
    let q = n / 4;
    let mut kept = Vec::new();
    let mut cur = x.clone();
    for i in 1..=3 {
        let a = layer(&cur, w, &format!("{prefix}.c{i}"), 1, Some(slope));
        kept.push(a.channels(0, q));
        cur = a.channels(q, n - q);
    }
    kept.push(layer(&cur, w, &format!("{prefix}.c4"), 1, None));
    let cat = Arr::concat(&kept.iter().collect::<Vec<_>>());
    layer(&cat, w, &format!("{prefix}.fuse"), 1, None).add(x)
}

/// Mean SSIM: 11x11 Gaussian window (sigma 1.5) over valid positions,
/// C1 = 0.01^2, C2 = 0.03^2, averaged over channels. Direct 2-D window sums.
pub fn ssim(a: &Arr, b: &Arr) -> f64 {
    let k = 11;
    let r = 5.0;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
            win[i * k + j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for c in 0..a.c {
        let mut sum = 0.0;
        let mut count = 0.0;
        for y in 0..=a.h - k {
            for x in 0..=a.w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i * k + j];
                        let (p, q) = (a.at(c, y + i, x + j), b.at(c, y + i, x + j));
                        mx += g * p;
                        my += g * q;
                        sxx += g * p * p;
                        syy += g * q * q;
                        sxy += g * p * q;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        acc += sum / count;
    }
    acc / a.c as f64
}

/// Random toy weights with non-zero final offset layers.
pub fn toy_weights(seed: u64) -> (ModelConfig, ModelWeights) {
    let cfg = ModelConfig::toy();
    let mut w = ModelWeights::init(&cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xABCD);
    for (name, t) in w.iter_mut() {
        if name.contains(".offset.") || name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.05..0.05));
        }
    }
    (cfg, w)
}
