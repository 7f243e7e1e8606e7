//! Browser bindings for a static demo page: frame degradation, deformable
//! sample-point placement and the complexity table.
//!
//! Each export has a plain Rust counterpart returning `Result<_, String>` so
//! it can be tested natively.

use dap_core::analysis::sample_points;
use dap_core::config::ModelConfig;
use dap_core::dap::OffsetField;
use dap_core::degrade::{bicubic_upsample, degrade, DegradeMode, DegradeSpec};
use dap_core::metrics::{analyze_complexity, psnr};
use dap_core::Tensor;
use wasm_bindgen::prelude::*;

/// RGBA bytes to a `(3, H, W)` frame in `[0, 1]`; alpha is dropped.
pub fn rgba_to_frame(rgba: &[u8], width: usize, height: usize) -> Result<Tensor, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("expected {} RGBA bytes, got {}", width * height * 4, rgba.len()));
    }
    let plane = width * height;
    Ok(Tensor::from_fn(&[3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        rgba[p * 4 + c] as f32 / 255.0
    }))
}

/// Opaque RGBA bytes of a `(3, H, W)` frame.
pub fn frame_to_rgba(frame: &Tensor) -> Vec<u8> {
    let (h, w) = (frame.dims()[1], frame.dims()[2]);
    let plane = h * w;
    let mut out = vec![255u8; plane * 4];
    for p in 0..plane {
        for c in 0..3 {
            out[p * 4 + c] = dap_core::metrics::quantize(frame.data()[c * plane + p]);
        }
    }
    out
}

fn mode(name: &str) -> Result<DegradeMode, String> {
    match name {
        "bd" => Ok(DegradeMode::Bd),
        "bi" => Ok(DegradeMode::Bi),
        other => Err(format!("unknown degradation `{other}`")),
    }
}

/// LR frame of an RGBA image as RGBA bytes, `width / 4` by `height / 4`.
pub fn degrade_rgba(rgba: &[u8], width: usize, height: usize, kind: &str, sigma: f64) -> Result<Vec<u8>, String> {
    let hr = rgba_to_frame(rgba, width, height)?;
    let spec = DegradeSpec { mode: mode(kind)?, sigma, ..DegradeSpec::default() };
    let lr = degrade(&hr, &spec).map_err(|e| e.to_string())?;
    Ok(frame_to_rgba(&lr))
}

/// Bicubic x4 of an LR RGBA image.
pub fn bicubic_rgba(lr_rgba: &[u8], width: usize, height: usize) -> Result<Vec<u8>, String> {
    let lr = rgba_to_frame(lr_rgba, width, height)?;
    let up = bicubic_upsample(&lr, 4).map_err(|e| e.to_string())?;
    Ok(frame_to_rgba(&up))
}

/// PSNR in dB between two RGBA images of the same size.
pub fn rgba_psnr(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64, String> {
    let fa = rgba_to_frame(a, width, height)?;
    let fb = rgba_to_frame(b, width, height)?;
    psnr(&fa, &fb).map_err(|e| e.to_string())
}

/// Sample locations of query pixel `(qy, qx)` when the `k` points sit on a
/// circle of radius `spread` around the displacement `(dx, dy)`, all in LR
/// pixels. Returned as JSON with both LR and HR coordinates.
#[allow(clippy::too_many_arguments)]
pub fn sample_points_json(
    width: usize,
    height: usize,
    k: usize,
    dx: f32,
    dy: f32,
    spread: f32,
    qy: usize,
    qx: usize,
) -> Result<String, String> {
    if k == 0 {
        return Err("k must be positive".into());
    }
    let plane = width * height;
    let grid = Tensor::from_fn(&[2 * k, height, width], |i| {
        let (ch, point) = (i / plane, i / plane / 2);
        let angle = std::f32::consts::TAU * point as f32 / k as f32;
        if ch % 2 == 0 {
            dx + spread * angle.cos()
        } else {
            dy + spread * angle.sin()
        }
    });
    let field = OffsetField::new(0, grid).map_err(|e| e.to_string())?;
    let export = sample_points(&field, &[(qy, qx)], 4).map_err(|e| e.to_string())?;
    serde_json::to_string(&export).map_err(|e| e.to_string())
}

/// `toy`, `dap64`, `dap128` or `ablation1` .. `ablation6`.
pub fn config_by_name(name: &str) -> Result<ModelConfig, String> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "dap64" => Ok(ModelConfig::dap(64)),
        "dap128" => Ok(ModelConfig::dap(128)),
        _ => match name.strip_prefix("ablation").and_then(|r| r.parse::<usize>().ok()) {
            Some(row) => ModelConfig::ablation(row).map_err(|e| e.to_string()),
            None => Err(format!("unknown configuration `{name}`")),
        },
    }
}

/// Complexity report of a named configuration as JSON.
pub fn complexity_json(name: &str, height: usize, width: usize) -> Result<String, String> {
    let cfg = config_by_name(name)?;
    let r = analyze_complexity(&cfg, height, width).map_err(|e| e.to_string())?;
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

fn js(r: Result<impl Into<JsValue>, String>) -> Result<JsValue, JsError> {
    r.map(Into::into).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn degrade_preview(rgba: &[u8], width: usize, height: usize, kind: &str, sigma: f64) -> Result<Vec<u8>, JsError> {
    degrade_rgba(rgba, width, height, kind, sigma).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn bicubic_preview(lr_rgba: &[u8], width: usize, height: usize) -> Result<Vec<u8>, JsError> {
    bicubic_rgba(lr_rgba, width, height).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn psnr_rgba(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64, JsError> {
    rgba_psnr(a, b, width, height).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sample_points_preview(
    width: usize,
    height: usize,
    k: usize,
    dx: f32,
    dy: f32,
    spread: f32,
    qy: usize,
    qx: usize,
) -> Result<JsValue, JsError> {
    js(sample_points_json(width, height, k, dx, dy, spread, qy, qx))
}

#[wasm_bindgen]
pub fn complexity(name: &str, height: usize, width: usize) -> Result<JsValue, JsError> {
    js(complexity_json(name, height, width))
}
