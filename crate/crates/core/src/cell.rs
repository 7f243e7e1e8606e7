//! The recurrent cell and the sequence driver.
//!
//! One step encodes the frame pair, predicts level-0 offsets, fuses the
//! previous hidden state, then runs the main block:
//! `agg -> IMDN x B -> out`, whose first `3r^2` channels become the
//! pixel-shuffled residual and whose remaining `n` channels become `h_t`.

use crate::config::ModelConfig;
use crate::ctx::Ctx;
use crate::dap::{self, OffsetField};
use crate::encoder::{self, Chain};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor, Var};
use crate::weights::ModelWeights;

/// Recurrent memory `h_t` and the number of steps since it was reset.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T: Real = f32> {
    pub map: Tensor<T>,
    pub step_index: usize,
}

impl<T: Real> HiddenState<T> {
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self {
            map: Tensor::zeros(&[n, h, w]),
            step_index: 0,
        }
    }
}

/// Result of one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Unclamped HR frame `(3, rH, rW)`.
    pub y: Tensor,
    pub hidden: HiddenState,
    /// Level-0 offsets, when the configuration predicts them.
    pub offsets: Option<OffsetField>,
}

pub(crate) struct StepVars {
    pub y: Var,
    pub h: Var,
    pub s0: Option<Var>,
}

/// Residual distillation block: three `conv -> split(n/4, 3n/4)` stages, a
/// final conv to `n/4`, concat, 1x1 fuse, plus the input.
pub(crate) fn imdn_graph<T: Real>(ctx: &mut Ctx<T>, prefix: &str, x: Var, n: usize) -> Result<Var> {
    if n % 4 != 0 {
        return shape_err(format!("IMDN width {n} is not divisible by 4"));
    }
    let (q, rest) = (n / 4, n - n / 4);
    let mut distilled = Vec::with_capacity(4);
    let mut cur = x;
    for i in 1..=3 {
        let a = ctx.conv(cur, &format!("{prefix}.c{i}"), 1, true)?;
        distilled.push(ctx.g.slice_channels(a, 0, q)?);
        cur = ctx.g.slice_channels(a, q, rest)?;
    }
    distilled.push(ctx.conv(cur, &format!("{prefix}.c4"), 1, false)?);
    let cat = ctx.g.concat(&distilled)?;
    let fused = ctx.conv(cat, &format!("{prefix}.fuse"), 1, false)?;
    ctx.g.add(fused, x)
}

/// One residual distillation block, weights under `prefix` (for example
/// `main.imdn0`).
pub fn imdn_block(x: &Tensor, weights: &ModelWeights, prefix: &str, cfg: &ModelConfig) -> Result<Tensor> {
    let mut ctx = Ctx::<f32>::new(weights, false, cfg.leaky_slope);
    let v = ctx.g.constant(x.clone());
    let y = imdn_graph(&mut ctx, prefix, v, cfg.n)?;
    Ok(ctx.g.take(y))
}

pub(crate) fn step_graph<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    x_t: Var,
    x_prev: Var,
    h_prev: Var,
) -> Result<StepVars> {
    let (mut x_t, mut s0) = (x_t, None);
    let vh = if cfg.uses_dap() {
        let top = cfg.top_level();
        let ft = encoder::encode_graph(ctx, cfg, x_t, Chain::Current, top)?;
        let fp = if cfg.offsets_enabled {
            encoder::encode_graph(ctx, cfg, x_prev, Chain::Previous, cfg.previous_top_level())?
        } else {
            Vec::new()
        };
        let (s, q0) = dap::pyramid_graph(ctx, cfg, &ft, &fp)?;
        if cfg.offsets_enabled {
            s0 = Some(s);
        }
        dap::fuse_hidden_graph(ctx, cfg, q0, h_prev, s)?
    } else {
        h_prev
    };
    let cat = ctx.g.concat(&[x_t, vh])?;
    let mut z = ctx.conv(cat, "main.agg", 1, false)?;
    for b in 0..cfg.imdn_blocks {
        match &mut s0 {
            Some(s) => ctx.segment(&mut [&mut x_t, &mut z, s]),
            None => ctx.segment(&mut [&mut x_t, &mut z]),
        }
        z = imdn_graph(ctx, &format!("main.imdn{b}"), z, cfg.n)?;
    }
    let out = ctx.conv(z, "main.out", 1, false)?;
    let hc = cfg.head_channels();
    let head = ctx.g.slice_channels(out, 0, hc)?;
    let h = ctx.g.slice_channels(out, hc, cfg.n)?;
    let sr = ctx.g.pixel_shuffle(head, cfg.scale)?;
    let base = ctx.g.nearest_upsample(x_t, cfg.scale)?;
    let y = ctx.g.add(sr, base)?;
    Ok(StepVars { y, h, s0 })
}

fn check_inputs(x_t: &Tensor, x_prev: &Tensor, h_prev: &HiddenState, cfg: &ModelConfig) -> Result<()> {
    let (h, w) = encoder::check_frame(x_t.dims(), cfg.divisor())?;
    if x_prev.dims() != x_t.dims() {
        return shape_err(format!(
            "previous frame {:?} vs current {:?}",
            x_prev.dims(),
            x_t.dims()
        ));
    }
    if h_prev.map.dims() != [cfg.n, h, w] {
        return shape_err(format!(
            "hidden state {:?}, expected {:?}",
            h_prev.map.dims(),
            [cfg.n, h, w]
        ));
    }
    x_t.check_finite("current frame")?;
    x_prev.check_finite("previous frame")?;
    h_prev.map.check_finite("hidden state")
}

/// One recurrent step on an LR frame pair.
pub fn step(
    x_t: &Tensor,
    x_prev: &Tensor,
    h_prev: &HiddenState,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<StepOutput> {
    check_inputs(x_t, x_prev, h_prev, cfg)?;
    let mut ctx = Ctx::<f32>::new(weights, false, cfg.leaky_slope);
    let a = ctx.g.constant(x_t.clone());
    let b = ctx.g.constant(x_prev.clone());
    let h = ctx.g.constant(h_prev.map.clone());
    let vars = step_graph(&mut ctx, cfg, a, b, h)?;
    let y = ctx.g.value(vars.y).clone();
    let map = ctx.g.value(vars.h).clone();
    y.check_finite("output frame")
        .and_then(|_| map.check_finite("hidden state"))
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let offsets = match vars.s0 {
        Some(s) => Some(OffsetField::new(0, ctx.g.value(s).clone())?),
        None => None,
    };
    Ok(StepOutput {
        y,
        hidden: HiddenState {
            map,
            step_index: h_prev.step_index + 1,
        },
        offsets,
    })
}

/// Temporal processing order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Forward,
    Reverse,
}

/// Pull-based frame supplier; `None` marks the end of the stream.
pub trait FrameSource {
    fn next_frame(&mut self) -> Option<Result<Tensor>>;
}

/// Frames from any iterator.
pub struct IterSource<I>(pub I);

impl<I: Iterator<Item = Tensor>> FrameSource for IterSource<I> {
    fn next_frame(&mut self) -> Option<Result<Tensor>> {
        self.0.next().map(Ok)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub direction: Direction,
    /// Reset the hidden state (and the previous frame) every `N` frames.
    pub reinit_every: Option<usize>,
}

/// Drives the cell over a stream. `emit(t, out)` receives outputs in the
/// original frame order. In forward mode each output is emitted before the
/// next frame is requested. Returns the number of frames processed.
pub fn run_sequence(
    source: &mut dyn FrameSource,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    opts: RunOptions,
    emit: &mut dyn FnMut(usize, StepOutput) -> Result<()>,
) -> Result<usize> {
    cfg.validate()?;
    let mut state: Option<(Tensor, HiddenState)> = None;
    let advance = |i: usize, x: &Tensor, state: &mut Option<(Tensor, HiddenState)>| {
        let reset = i > 0 && opts.reinit_every.is_some_and(|n| n > 0 && i % n == 0);
        let (prev, h) = match state.take() {
            Some(s) if !reset => s,
            _ => {
                let (_, hh, ww) = x.chw()?;
                (x.clone(), HiddenState::zeros(cfg.n, hh, ww))
            }
        };
        let out = step(x, &prev, &h, weights, cfg)?;
        *state = Some((x.clone(), out.hidden.clone()));
        Ok::<_, Error>(out)
    };
    match opts.direction {
        Direction::Forward => {
            let mut t = 0;
            while let Some(frame) = source.next_frame() {
                let out = advance(t, &frame?, &mut state)?;
                emit(t, out)?;
                t += 1;
            }
            if t == 0 {
                return Err(Error::Contract("empty frame source".into()));
            }
            Ok(t)
        }
        Direction::Reverse => {
            let mut frames = Vec::new();
            while let Some(frame) = source.next_frame() {
                frames.push(frame?);
            }
            if frames.is_empty() {
                return Err(Error::Contract("empty frame source".into()));
            }
            let total = frames.len();
            let mut outs: Vec<Option<StepOutput>> = (0..total).map(|_| None).collect();
            for (i, x) in frames.iter().rev().enumerate() {
                outs[total - 1 - i] = Some(advance(i, x, &mut state)?);
            }
            for (t, out) in outs.into_iter().enumerate() {
                emit(t, out.expect("every frame processed"))?;
            }
            Ok(total)
        }
    }
}

/// Collects [`run_sequence`] outputs for an in-memory sequence.
pub fn run_frames(
    frames: &[Tensor],
    weights: &ModelWeights,
    cfg: &ModelConfig,
    opts: RunOptions,
) -> Result<Vec<StepOutput>> {
    let mut outs = Vec::with_capacity(frames.len());
    let mut src = IterSource(frames.iter().cloned());
    run_sequence(&mut src, weights, cfg, opts, &mut |_, o| {
        outs.push(o);
        Ok(())
    })?;
    Ok(outs)
}
