use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::SCHEMA_VERSION;
use crate::cell::{step, HiddenState};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::{offset_input_channels, ModelWeights};

/// Closed-form cost of one layer for one frame step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub output: Vec<usize>,
    pub macs: u64,
    pub exps: u64,
    pub divs: u64,
    pub sample_points: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub schema_version: u32,
    pub config: String,
    /// LR frame `(3, H, W)` as requested.
    pub input_dims: Vec<usize>,
    /// Extents actually processed (padded up to the pyramid divisor).
    pub padded_dims: Vec<usize>,
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_exps: u64,
    pub total_divs: u64,
    pub total_sample_points: u64,
    /// `2 * MACs + exps + divs`.
    pub total_flops: u64,
    pub gmacs: f64,
    pub gflops: f64,
}

#[derive(Default)]
struct Plan {
    layers: Vec<LayerCost>,
}

impl Plan {
    fn push(&mut self, name: String, kind: &str, output: Vec<usize>, macs: u64, softmax: u64, points: u64) {
        self.layers.push(LayerCost {
            name,
            kind: kind.into(),
            output,
            macs,
            exps: softmax,
            divs: softmax,
            sample_points: points,
            flops: 2 * macs + 2 * softmax,
        });
    }

    /// `batch` maps of `cin` channels, `groups`-grouped `k x k` conv.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, batch: usize, cin: usize, cout: usize, kernel: usize, groups: usize, h: usize, w: usize) {
        let macs = batch * (cin / groups) * cout * kernel * kernel * h * w;
        let mut out = vec![cout, h, w];
        if batch > 1 {
            out.insert(0, batch);
        }
        self.push(name.into(), "conv", out, macs as u64, 0, 0);
    }

    fn resize(&mut self, name: String, c: usize, oh: usize, ow: usize) {
        self.push(name, "bilinear_resize", vec![c, oh, ow], (4 * c * oh * ow) as u64, 0, 0);
    }

    fn sample(&mut self, name: String, k: usize, c: usize, h: usize, w: usize) {
        let macs = 4 * k * c * h * w;
        self.push(name, "sample", vec![k, c, h, w], macs as u64, 0, (k * h * w) as u64);
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(&mut self, name: String, k: usize, dq: usize, cv: usize, groups: usize, h: usize, w: usize) {
        let macs = k * (dq + cv) * h * w;
        let sm = k * groups * h * w;
        self.push(name, "attention", vec![cv, h, w], macs as u64, sm as u64, 0);
    }
}

fn plan_encoder(p: &mut Plan, cfg: &ModelConfig, chain: &str, top: usize, h: usize, w: usize) {
    let d = cfg.d;
    for l in 0..=top {
        let (bh, bw) = (h >> l.saturating_sub(1), w >> l.saturating_sub(1));
        for i in 0..cfg.encoder_convs {
            let cin = if l == 0 && i == 0 { 3 } else { d };
            p.conv(&format!("encoder.{chain}.l{l}.conv{i}"), 1, cin, d, 3, 1, bh, bw);
        }
        if l > 0 {
            p.resize(format!("encoder.{chain}.l{l}.down"), d, h >> l, w >> l);
        }
    }
}

fn plan_offset_block(p: &mut Plan, cfg: &ModelConfig, l: usize, h: usize, w: usize) {
    let mut cin = offset_input_channels(cfg, l);
    let widths: Vec<usize> = cfg.offset_hidden.iter().copied().chain([2 * cfg.k]).collect();
    for (i, &cout) in widths.iter().enumerate() {
        p.conv(&format!("dap.l{l}.offset.conv{i}"), 1, cin, cout, cfg.offset_kernel, 1, h, w);
        cin = cout;
    }
}

fn plan_step(p: &mut Plan, cfg: &ModelConfig, h: usize, w: usize) {
    let (d, k, n, g) = (cfg.d, cfg.k, cfg.n, cfg.groups);
    if cfg.uses_dap() {
        plan_encoder(p, cfg, "t", cfg.top_level(), h, w);
        if cfg.offsets_enabled {
            plan_encoder(p, cfg, "prev", cfg.previous_top_level(), h, w);
        }
        if !cfg.offsets_enabled || !cfg.pyramid_enabled {
            if cfg.offsets_enabled {
                plan_offset_block(p, cfg, 0, h, w);
            }
            if cfg.attention_enabled {
                p.conv("dap.l0.q", 1, d, d, 1, 1, h, w);
            }
        } else {
            let top = cfg.levels;
            plan_offset_block(p, cfg, top, h >> top, w >> top);
            for l in (0..top).rev() {
                let (lh, lw) = (h >> l, w >> l);
                p.resize(format!("dap.l{l}.upscale"), 2 * k, lh, lw);
                if cfg.attention_enabled {
                    p.conv(&format!("dap.l{l}.q"), 1, d, d, 1, 1, lh, lw);
                    p.sample(format!("dap.l{l}.sample"), k, d, lh, lw);
                    p.conv(&format!("dap.l{l}.k"), k, d, d, 1, 1, lh, lw);
                    p.conv(&format!("dap.l{l}.v"), k, d, d, 1, 1, lh, lw);
                    p.attention(format!("dap.l{l}.attention"), k, d, d, g, lh, lw);
                } else {
                    p.sample(format!("dap.l{l}.sample"), k, d, lh, lw);
                    p.conv(&format!("dap.l{l}.fuse"), 1, k * d, d, 3, 1, lh, lw);
                }
                plan_offset_block(p, cfg, l, lh, lw);
            }
        }
        p.sample("hidden.sample".into(), k, n, h, w);
        if cfg.attention_enabled {
            p.conv("hidden.k", k, n, d, 1, 1, h, w);
            p.conv("hidden.v", k, n, n, 1, g, h, w);
            p.attention("hidden.attention".into(), k, d, n, g, h, w);
        } else {
            p.conv("hidden.fuse", 1, k * n, n, 3, 1, h, w);
        }
    }
    p.conv("main.agg", 1, n + 3, n, 3, 1, h, w);
    let (q, rest) = (n / 4, n - n / 4);
    for b in 0..cfg.imdn_blocks {
        let pre = format!("main.imdn{b}");
        p.conv(&format!("{pre}.c1"), 1, n, n, 3, 1, h, w);
        p.conv(&format!("{pre}.c2"), 1, rest, n, 3, 1, h, w);
        p.conv(&format!("{pre}.c3"), 1, rest, n, 3, 1, h, w);
        p.conv(&format!("{pre}.c4"), 1, rest, q, 3, 1, h, w);
        p.conv(&format!("{pre}.fuse"), 1, n, n, 1, 1, h, w);
    }
    p.conv("main.out", 1, n, cfg.head_channels() + n, 3, 1, h, w);
}

/// Per-layer multiply-accumulate and softmax counts of one step at LR
/// extents `h x w`, without running the model.
pub fn analyze_complexity(cfg: &ModelConfig, h: usize, w: usize) -> Result<ComplexityReport> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("empty input {h}x{w}")));
    }
    let div = cfg.divisor();
    let (ph, pw) = (h.div_ceil(div) * div, w.div_ceil(div) * div);
    let mut plan = Plan::default();
    plan_step(&mut plan, cfg, ph, pw);
    let layers = plan.layers;
    let total_macs = layers.iter().map(|l| l.macs).sum();
    let total_exps = layers.iter().map(|l| l.exps).sum();
    let total_divs = layers.iter().map(|l| l.divs).sum();
    let total_sample_points = layers.iter().map(|l| l.sample_points).sum();
    let total_flops = layers.iter().map(|l| l.flops).sum();
    Ok(ComplexityReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.name.clone(),
        input_dims: vec![3, h, w],
        padded_dims: vec![3, ph, pw],
        gmacs: total_macs as f64 / 1e9,
        gflops: total_flops as f64 / 1e9,
        layers,
        total_macs,
        total_exps,
        total_divs,
        total_sample_points,
        total_flops,
    })
}

/// Median wall-clock time of one recurrent step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub schema_version: u32,
    pub config: String,
    pub input_dims: Vec<usize>,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
    pub ms_per_frame: f64,
    pub fps: f64,
    pub samples_ms: Vec<f64>,
}

/// Runs `warmup + iters` recurrent steps over `frames` (cycled) and reports
/// the median of the timed steps.
pub fn profile_runtime(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    frames: &[Tensor],
    warmup: usize,
    iters: usize,
) -> Result<RuntimeReport> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Contract("profiling needs at least one frame".into()))?;
    if iters == 0 {
        return Err(Error::Contract("profiling needs at least one timed iteration".into()));
    }
    let (_, h, w) = first.chw()?;
    let mut prev = first.clone();
    let mut hidden = HiddenState::zeros(cfg.n, h, w);
    let mut samples = Vec::with_capacity(iters);
    for i in 0..warmup + iters {
        let x = &frames[i % frames.len()];
        let t0 = Instant::now();
        let out = step(x, &prev, &hidden, weights, cfg)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        if i >= warmup {
            samples.push(ms);
        }
        hidden = out.hidden;
        prev = x.clone();
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let ms = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(RuntimeReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.name.clone(),
        input_dims: vec![3, h, w],
        warmup,
        iters,
        threads: 1,
        ms_per_frame: ms,
        fps: 1000.0 / ms,
        samples_ms: samples,
    })
}
