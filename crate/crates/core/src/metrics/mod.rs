//! Image quality metrics, the closed-form complexity analyzer and the
//! runtime profiler.

mod complexity;

pub use complexity::{analyze_complexity, profile_runtime, ComplexityReport, LayerCost, RuntimeReport};

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

/// Colour space metrics are computed in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    #[default]
    Rgb,
    Y,
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("metric inputs {:?} vs {:?}", a.dims(), b.dims()));
    }
    a.chw()?;
    Ok(())
}

/// `10 log10(1 / MSE)`; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// 8-bit code of an intensity: clamp to `[0,1]`, scale by 255, round half
/// away from zero.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The frame as it reads back after an 8-bit write.
pub fn quantize_frame(img: &Tensor) -> Tensor {
    img.map(|v| quantize(v) as f32 / 255.0)
}

/// BT.601 luma of an RGB frame in `[0,1]`, scaled back to `[0,1]`.
pub fn rgb_to_y(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return shape_err(format!("rgb_to_y needs 3 channels, got {c}"));
    }
    let p = h * w;
    let d = img.data();
    let y = (0..p)
        .map(|i| {
            let (r, g, b) = (d[i] as f64, d[p + i] as f64, d[2 * p + i] as f64);
            ((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0) as f32
        })
        .collect();
    Tensor::new(&[1, h, w], y)
}

/// Removes `n` pixels from every border.
pub fn crop_border(img: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Ok(img.clone());
    }
    let (c, h, w) = img.chw()?;
    if 2 * n >= h || 2 * n >= w {
        return shape_err(format!("cannot crop {n} pixels from {h}x{w}"));
    }
    let (oh, ow) = (h - 2 * n, w - 2 * n);
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), i / ow % oh, i % ow);
        img.at3(ch, y + n, x + n)
    }))
}

const SSIM_SIZE: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_SIZE / 2) as f64;
    let g: Vec<f64> = (0..SSIM_SIZE)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|j| g[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, data range 1) averaged
/// over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.chw()?;
    if h < SSIM_SIZE || w < SSIM_SIZE {
        return shape_err(format!("ssim needs at least {SSIM_SIZE}x{SSIM_SIZE}, got {h}x{w}"));
    }
    if a == b {
        return Ok(1.0);
    }
    let g = ssim_window();
    let p = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * p..(ch + 1) * p].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[ch * p..(ch + 1) * p].iter().map(|&v| v as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let sxx = filter_valid(&prod(&x, &x), h, w, &g);
        let syy = filter_valid(&prod(&y, &y), h, w, &g);
        let sxy = filter_valid(&prod(&x, &y), h, w, &g);
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                ((2.0 * ux * uy + C1) * (2.0 * cxy + C2))
                    / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / c as f64)
}

/// Serializes infinite PSNR as the string `"inf"`.
pub fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn ser_db_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&Db(*x))?;
    }
    seq.end()
}

struct Db(f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ser_db(&self.0, s)
    }
}

/// Renders a PSNR value the way reports do.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Per-frame and mean quality of a predicted sequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub space: ColorSpace,
    pub crop_border: usize,
    #[serde(serialize_with = "ser_db_vec")]
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    #[serde(serialize_with = "ser_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn compute(gt: &[Tensor], pred: &[Tensor], space: ColorSpace, crop: usize) -> Result<Self> {
        if gt.len() != pred.len() || gt.is_empty() {
            return Err(Error::Contract(format!(
                "{} ground-truth frames vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let mut psnrs = Vec::with_capacity(gt.len());
        let mut ssims = Vec::with_capacity(gt.len());
        for (g, p) in gt.iter().zip(pred) {
            let (g, p) = match space {
                ColorSpace::Rgb => (g.clone(), p.clone()),
                ColorSpace::Y => (rgb_to_y(g)?, rgb_to_y(p)?),
            };
            let (g, p) = (crop_border(&g, crop)?, crop_border(&p, crop)?);
            psnrs.push(psnr(&g, &p)?);
            ssims.push(ssim(&g, &p)?);
        }
        let n = gt.len() as f64;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            space,
            crop_border: crop,
            mean_psnr: psnrs.iter().sum::<f64>() / n,
            mean_ssim: ssims.iter().sum::<f64>() / n,
            psnr: psnrs,
            ssim: ssims,
        })
    }

    /// `frame,psnr,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim\n");
        for (i, (p, q)) in self.psnr.iter().zip(&self.ssim).enumerate() {
            s.push_str(&format!("{i},{},{q:.6}\n", format_db(*p)));
        }
        s
    }
}
