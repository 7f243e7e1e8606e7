//! HR-to-LR degradations (Gaussian blur + subsampling, antialiased bicubic),
//! the bicubic upsampling baseline, and training augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradeMode {
    #[default]
    Bd,
    Bi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeSpec {
    pub mode: DegradeMode,
    pub sigma: f64,
    pub kernel_size: usize,
    pub scale: usize,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            mode: DegradeMode::Bd,
            sigma: 1.6,
            kernel_size: 13,
            scale: 4,
        }
    }
}

/// Isotropic Gaussian sampled at integer offsets, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Tensor<f64>> {
    if size % 2 == 0 {
        return shape_err(format!("Gaussian kernel size {size} must be odd"));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma {sigma} must be positive")));
    }
    let r = (size / 2) as f64;
    let raw = Tensor::from_fn(&[size, size], |i| {
        let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    let sum: f64 = raw.data().iter().sum();
    Ok(raw.map(|v| v / sum))
}

/// Reflect-101 index (the edge sample is not repeated).
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Half-sample symmetric index (the edge sample is repeated).
fn symmetric(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

fn check_hr(hr: &Tensor, scale: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = hr.chw()?;
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return shape_err(format!("{h}x{w} is not divisible by scale {scale}"));
    }
    Ok((c, h, w))
}

/// Gaussian blur (reflect-101 borders) then every `scale`-th pixel from 0.
pub fn degrade_bd(hr: &Tensor, spec: &DegradeSpec) -> Result<Tensor> {
    let s = spec.scale;
    let (c, h, w) = check_hr(hr, s)?;
    let k = gaussian_kernel(spec.sigma, spec.kernel_size)?;
    let ks = spec.kernel_size;
    let r = (ks / 2) as isize;
    let (oh, ow) = (h / s, w / s);
    let kd = k.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, oy, ox) = (i / (oh * ow), i / ow % oh, i % ow);
        let (cy, cx) = ((oy * s) as isize, (ox * s) as isize);
        let mut acc = 0.0f64;
        for ky in 0..ks {
            let y = reflect101(cy + ky as isize - r, h);
            for kx in 0..ks {
                let x = reflect101(cx + kx as isize - r, w);
                acc += kd[ky * ks + kx] * hr.at3(ch, y, x) as f64;
            }
        }
        acc as f32
    }))
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized taps `(index, weight)` for resizing `len_in` to `len_out`,
/// with the kernel widened by the reduction factor when shrinking.
fn cubic_taps(len_in: usize, len_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = len_out as f64 / len_in as f64;
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let width = 4.0 / stretch;
    (0..len_out)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let left = (center - width / 2.0).floor() as isize;
            let n = width.ceil() as isize + 2;
            let mut taps: Vec<(usize, f64)> = (left..left + n)
                .map(|j| {
                    let wgt = stretch * cubic(stretch * (center - j as f64));
                    (symmetric(j, len_in), wgt)
                })
                .filter(|t| t.1 != 0.0)
                .collect();
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= sum);
            taps
        })
        .collect()
}

/// Separable cubic resize of every channel to `oh x ow`.
fn cubic_resize(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    let ty = cubic_taps(h, oh);
    let tx = cubic_taps(w, ow);
    let mut rows = vec![0.0f64; c * h * ow];
    for ch in 0..c {
        for y in 0..h {
            for (ox, taps) in tx.iter().enumerate() {
                rows[(ch * h + y) * ow + ox] =
                    taps.iter().map(|&(x, wt)| wt * img.at3(ch, y, x) as f64).sum();
            }
        }
    }
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, oy, ox) = (i / (oh * ow), i / ow % oh, i % ow);
        ty[oy]
            .iter()
            .map(|&(y, wt)| wt * rows[(ch * h + y) * ow + ox])
            .sum::<f64>() as f32
    }))
}

/// Antialiased bicubic downsampling by `spec.scale`.
pub fn degrade_bi(hr: &Tensor, spec: &DegradeSpec) -> Result<Tensor> {
    let (_, h, w) = check_hr(hr, spec.scale)?;
    cubic_resize(hr, h / spec.scale, w / spec.scale)
}

pub fn degrade(hr: &Tensor, spec: &DegradeSpec) -> Result<Tensor> {
    match spec.mode {
        DegradeMode::Bd => degrade_bd(hr, spec),
        DegradeMode::Bi => degrade_bi(hr, spec),
    }
}

/// Bicubic upsampling, clamped to `[0, 1]`.
pub fn bicubic_upsample(lr: &Tensor, scale: usize) -> Result<Tensor> {
    let (_, h, w) = lr.chw()?;
    Ok(cubic_resize(lr, h * scale, w * scale)?.map(|v| v.clamp(0.0, 1.0)))
}

fn flip_w(t: &Tensor) -> Tensor {
    let (c, h, w) = t.chw().expect("rank 3");
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), i / w % h, i % w);
        t.at3(ch, y, w - 1 - x)
    })
}

fn flip_h(t: &Tensor) -> Tensor {
    let (c, h, w) = t.chw().expect("rank 3");
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), i / w % h, i % w);
        t.at3(ch, h - 1 - y, x)
    })
}

/// Counter-clockwise rotation by 90 degrees.
fn rot90(t: &Tensor) -> Tensor {
    let (c, h, w) = t.chw().expect("rank 3");
    Tensor::from_fn(&[c, w, h], |i| {
        let (ch, y, x) = (i / (w * h), i / h % w, i % h);
        t.at3(ch, x, w - 1 - y)
    })
}

fn crop(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let c = t.dims()[0];
    Tensor::from_fn(&[c, ch, cw], |i| {
        let (k, y, x) = (i / (ch * cw), i / cw % ch, i % cw);
        t.at3(k, y0 + y, x0 + x)
    })
}

/// One draw of the augmentation transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Counter-clockwise quarter turns.
    pub rotations: u8,
    pub reverse_time: bool,
    /// Top-left HR corner of the crop, a multiple of the scale.
    pub crop_origin: (usize, usize),
    pub crop_size: usize,
}

impl Augment {
    /// Draws a transform for HR frames of `h x w`; `crop_size` HR pixels,
    /// origin aligned to `scale`.
    pub fn draw(seed: u64, h: usize, w: usize, crop_size: usize, scale: usize, geometric: bool) -> Result<Self> {
        if crop_size > h || crop_size > w {
            return shape_err(format!("crop {crop_size} exceeds frame {h}x{w}"));
        }
        if crop_size % scale != 0 {
            return shape_err(format!("crop {crop_size} is not a multiple of {scale}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cy = rng.gen_range(0..=(h - crop_size) / scale) * scale;
        let cx = rng.gen_range(0..=(w - crop_size) / scale) * scale;
        let (fh, fv, rot, rev) = if geometric {
            (rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_range(0..4u8), rng.gen_bool(0.5))
        } else {
            (false, false, 0, false)
        };
        Ok(Self {
            flip_horizontal: fh,
            flip_vertical: fv,
            rotations: rot,
            reverse_time: rev,
            crop_origin: (cy, cx),
            crop_size,
        })
    }

    /// Applies the spatial part to one frame whose pixels are `1/factor` HR
    /// pixels (1 for HR, the scale for LR).
    pub fn apply_frame(&self, t: &Tensor, factor: usize) -> Tensor {
        let (y0, x0) = (self.crop_origin.0 / factor, self.crop_origin.1 / factor);
        let s = self.crop_size / factor;
        let mut out = crop(t, y0, x0, s, s);
        if self.flip_horizontal {
            out = flip_w(&out);
        }
        if self.flip_vertical {
            out = flip_h(&out);
        }
        for _ in 0..self.rotations {
            out = rot90(&out);
        }
        out
    }

    pub fn apply_sequence(&self, frames: &[Tensor], factor: usize) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = frames.iter().map(|f| self.apply_frame(f, factor)).collect();
        if self.reverse_time {
            v.reverse();
        }
        v
    }
}

/// Applies one seeded transform to an aligned LR/HR sequence pair.
pub fn augment(
    lr: &[Tensor],
    hr: &[Tensor],
    seed: u64,
    crop_size: usize,
    scale: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let first = hr.first().ok_or_else(|| Error::Contract("empty sequence".into()))?;
    let (_, h, w) = first.chw()?;
    let a = Augment::draw(seed, h, w, crop_size, scale, true)?;
    Ok((a.apply_sequence(lr, scale), a.apply_sequence(hr, 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_normalized_and_peaked() {
        let k = gaussian_kernel(1.6, 13).unwrap();
        let s: f64 = k.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-7);
        let max = k.data().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, k.data()[6 * 13 + 6]);
        assert!(gaussian_kernel(1.6, 12).is_err());
    }

    #[test]
    fn bd_constant_and_shape() {
        let hr = Tensor::full(&[3, 32, 24], 0.37);
        let lr = degrade_bd(&hr, &DegradeSpec::default()).unwrap();
        assert_eq!(lr.dims(), &[3, 8, 6]);
        assert!(lr.data().iter().all(|&v| v == 0.37f32 || (v - 0.37).abs() < 1e-7));
        assert!(degrade_bd(&Tensor::zeros(&[3, 30, 24]), &DegradeSpec::default()).is_err());
    }

    #[test]
    fn bd_impulse_response() {
        let mut hr = Tensor::zeros(&[1, 40, 40]);
        hr.data_mut()[20 * 40 + 20] = 1.0;
        let lr = degrade_bd(&hr, &DegradeSpec::default()).unwrap();
        let k = gaussian_kernel(1.6, 13).unwrap();
        for oy in 0..10 {
            for ox in 0..10 {
                let (dy, dx) = (20 - 4 * oy as isize, 20 - 4 * ox as isize);
                let expect = if dy.abs() <= 6 && dx.abs() <= 6 {
                    k.data()[((dy + 6) * 13 + dx + 6) as usize]
                } else {
                    0.0
                };
                assert!((lr.at3(0, oy, ox) as f64 - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn bi_preserves_constants_and_ramps() {
        let spec = DegradeSpec { mode: DegradeMode::Bi, ..DegradeSpec::default() };
        let c = degrade_bi(&Tensor::full(&[3, 16, 16], 0.6), &spec).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
        let ramp = Tensor::from_fn(&[1, 32, 64], |i| (i % 64) as f32 / 64.0);
        let lr = degrade_bi(&ramp, &spec).unwrap();
        // Away from the border the sample at column j sits at 4j + 1.5.
        for j in 3..13 {
            let expect = (4.0 * j as f32 + 1.5) / 64.0;
            assert!((lr.at3(0, 4, j) - expect).abs() < 1e-4, "{j}");
        }
    }

    #[test]
    fn upsample_reproduces_linear_interior() {
        let lr = Tensor::from_fn(&[1, 8, 8], |i| (i % 8) as f32 / 10.0);
        let up = bicubic_upsample(&lr, 4).unwrap();
        assert_eq!(up.dims(), &[1, 32, 32]);
        for x in 8..24 {
            let expect = ((x as f32 + 0.5) / 4.0 - 0.5) / 10.0;
            assert!((up.at3(0, 5, x) - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn transforms_round_trip() {
        let t = Tensor::from_fn(&[2, 4, 6], |i| i as f32);
        assert_eq!(flip_w(&flip_w(&t)), t);
        assert_eq!(flip_h(&flip_h(&t)), t);
        let mut r = t.clone();
        for _ in 0..4 {
            r = rot90(&r);
        }
        assert_eq!(r, t);
        assert_eq!(rot90(&t).dims(), &[2, 6, 4]);
    }

    #[test]
    fn augmentation_is_seeded_and_aligned() {
        let hr: Vec<Tensor> = (0..3)
            .map(|s| Tensor::from_fn(&[3, 64, 48], |i| ((i * 7 + s * 13) % 101) as f32 / 100.0))
            .collect();
        let spec = DegradeSpec::default();
        let lr: Vec<Tensor> = hr.iter().map(|f| degrade_bd(f, &spec).unwrap()).collect();
        let a = augment(&lr, &hr, 5, 32, 4).unwrap();
        assert_eq!(a, augment(&lr, &hr, 5, 32, 4).unwrap());
        assert!(augment(&lr, &hr, 5, 80, 4).is_err());
        // Cropping then degrading matches degrading then cropping, away from
        // the filter's border support.
        let t = Augment::draw(11, 64, 48, 32, 4, false).unwrap();
        let direct = degrade_bd(&t.apply_frame(&hr[0], 1), &spec).unwrap();
        let cropped = t.apply_frame(&lr[0], 4);
        for y in 2..6 {
            for x in 2..6 {
                for c in 0..3 {
                    assert!((direct.at3(c, y, x) - cropped.at3(c, y, x)).abs() < 1e-6);
                }
            }
        }
    }
}
