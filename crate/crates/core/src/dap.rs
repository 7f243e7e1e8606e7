//! Deformable attention pyramid: offset-guided attention per level,
//! coarse-to-fine offset refinement, and fusion of the hidden state.
//!
//! Offsets are `(2k, h, w)` maps in the pixel units of their own level;
//! channels `2i` and `2i+1` hold `dx` (along width) and `dy` of point `i`.

use crate::config::ModelConfig;
use crate::counter;
use crate::ctx::Ctx;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Resize, Tensor, Var};
use crate::weights::ModelWeights;

/// Sampling displacements at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T: Real = f32> {
    pub level: usize,
    pub grid: Tensor<T>,
}

impl<T: Real> OffsetField<T> {
    pub fn new(level: usize, grid: Tensor<T>) -> Result<Self> {
        let (c, _, _) = grid.chw()?;
        if c == 0 || c % 2 != 0 {
            return shape_err(format!("offset field needs 2k channels, got {c}"));
        }
        grid.check_finite("offset field")?;
        Ok(Self { level, grid })
    }

    pub fn zeros(level: usize, k: usize, h: usize, w: usize) -> Self {
        Self {
            level,
            grid: Tensor::zeros(&[2 * k, h, w]),
        }
    }

    pub fn k(&self) -> usize {
        self.grid.dims()[0] / 2
    }

    /// `(dx, dy)` of point `i` at pixel `(y, x)`.
    pub fn at(&self, i: usize, y: usize, x: usize) -> (T, T) {
        (self.grid.at3(2 * i, y, x), self.grid.at3(2 * i + 1, y, x))
    }
}

fn softmax_scale<T: Real>(cfg: &ModelConfig) -> T {
    T::lit(1.0 / (cfg.d as f64).sqrt())
}

/// Level attention: query from `f_t`, keys and values embedded from the
/// features of `f_prev` sampled at `offsets`. Returns `(v, q)`.
pub(crate) fn attend_level_graph<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    level: usize,
    f_t: Var,
    f_prev: Var,
    offsets: Var,
) -> Result<(Var, Var)> {
    counter::add_dap_call();
    let p = format!("dap.l{level}");
    let q = ctx.conv(f_t, &format!("{p}.q"), 1, false)?;
    let samples = ctx.g.sample(f_prev, offsets)?;
    let keys = ctx.conv(samples, &format!("{p}.k"), 1, false)?;
    let values = ctx.conv(samples, &format!("{p}.v"), 1, false)?;
    let v = ctx.g.attention(q, keys, values, cfg.groups, softmax_scale(cfg))?;
    Ok((v, q))
}

/// Convolutional replacement for attention: the `k` sampled maps are stacked
/// along channels and fused by a 3x3 conv.
pub(crate) fn conv_fuse_graph<T: Real>(
    ctx: &mut Ctx<T>,
    prefix: &str,
    features: Var,
    offsets: Var,
) -> Result<Var> {
    counter::add_dap_call();
    let samples = ctx.g.sample(features, offsets)?;
    let [k, c, h, w] = ctx.g.value(samples).dims()[..] else {
        unreachable!("sample output is rank 4")
    };
    let stacked = ctx.g.reshape(samples, &[k * c, h, w])?;
    ctx.conv(stacked, prefix, 1, false)
}

fn offset_block<T: Real>(ctx: &mut Ctx<T>, cfg: &ModelConfig, level: usize, x: Var) -> Result<Var> {
    let layers = cfg.offset_hidden.len() + 1;
    let mut y = x;
    for i in 0..layers {
        y = ctx.conv(y, &format!("dap.l{level}.offset.conv{i}"), 1, i + 1 < layers)?;
    }
    Ok(y)
}

/// Bilinear x2 upsampling of an offset field with values doubled.
pub(crate) fn upscale_offsets_graph<T: Real>(ctx: &mut Ctx<T>, coarse: Var) -> Result<Var> {
    let up = ctx.g.resize(coarse, Resize::Up2)?;
    ctx.g.scale(up, T::lit(2.0))
}

/// `s = C_S(concat(f_t, v, up)) + up`, or `C_S(f_t)` at the base level.
pub(crate) fn refine_graph<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    level: usize,
    f_t: Var,
    refine: Option<(Var, Var)>,
) -> Result<Var> {
    counter::add_dap_call();
    match refine {
        None => offset_block(ctx, cfg, level, f_t),
        Some((v, up)) => {
            let x = ctx.g.concat(&[f_t, v, up])?;
            let r = offset_block(ctx, cfg, level, x)?;
            ctx.g.add(r, up)
        }
    }
}

/// Level-0 offsets and, when attention is on, the level-0 query embedding.
///
/// Without a pyramid, the single offset block sees `concat(f0_t, f0_prev)`.
/// With offsets disabled the field is identically zero.
pub(crate) fn pyramid_graph<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    f_t: &[Var],
    f_prev: &[Var],
) -> Result<(Var, Option<Var>)> {
    let (_, h, w) = ctx.g.value(f_t[0]).chw()?;
    if !cfg.offsets_enabled {
        let s0 = ctx.g.constant(Tensor::zeros(&[2 * cfg.k, h, w]));
        let q0 = if cfg.attention_enabled {
            Some(ctx.conv(f_t[0], "dap.l0.q", 1, false)?)
        } else {
            None
        };
        return Ok((s0, q0));
    }
    if !cfg.pyramid_enabled {
        counter::add_dap_call();
        let x = ctx.g.concat(&[f_t[0], f_prev[0]])?;
        let s0 = offset_block(ctx, cfg, 0, x)?;
        let q0 = if cfg.attention_enabled {
            Some(ctx.conv(f_t[0], "dap.l0.q", 1, false)?)
        } else {
            None
        };
        return Ok((s0, q0));
    }
    let top = cfg.levels;
    if f_t.len() != top + 1 || f_prev.len() != top {
        return shape_err(format!(
            "pyramids with {} and {} levels, expected {} and {top}",
            f_t.len(),
            f_prev.len(),
            top + 1
        ));
    }
    let mut s = refine_graph(ctx, cfg, top, f_t[top], None)?;
    let mut q0 = None;
    for l in (0..top).rev() {
        let up = upscale_offsets_graph(ctx, s)?;
        let v = if cfg.attention_enabled {
            let (v, q) = attend_level_graph(ctx, cfg, l, f_t[l], f_prev[l], up)?;
            if l == 0 {
                q0 = Some(q);
            }
            v
        } else {
            conv_fuse_graph(ctx, &format!("dap.l{l}.fuse"), f_prev[l], up)?
        };
        s = refine_graph(ctx, cfg, l, f_t[l], Some((v, up)))?;
    }
    Ok((s, q0))
}

/// Hidden-state fusion at the level-0 offsets. With attention the keys are
/// embedded to `d` channels and the values keep their width `n`.
pub(crate) fn fuse_hidden_graph<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    q0: Option<Var>,
    h_prev: Var,
    s0: Var,
) -> Result<Var> {
    if !cfg.attention_enabled {
        return conv_fuse_graph(ctx, "hidden.fuse", h_prev, s0);
    }
    let q0 = q0.ok_or_else(|| Error::Contract("attention fusion needs a query".into()))?;
    counter::add_dap_call();
    let samples = ctx.g.sample(h_prev, s0)?;
    let keys = ctx.conv(samples, "hidden.k", 1, false)?;
    let values = ctx.conv(samples, "hidden.v", cfg.groups, false)?;
    ctx.g.attention(q0, keys, values, cfg.groups, softmax_scale(cfg))
}

fn inference<'w>(weights: &'w ModelWeights, cfg: &ModelConfig) -> Ctx<'w, f32> {
    Ctx::new(weights, false, cfg.leaky_slope)
}

fn same_grid(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    let (_, ha, wa) = a.chw()?;
    let (_, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return shape_err(format!("{what}: {ha}x{wa} vs {hb}x{wb}"));
    }
    Ok(())
}

/// Samples `features` at the `k` points of `offsets`; `(k, C, H, W)`.
pub fn sample_kv(features: &Tensor, offsets: &OffsetField) -> Result<Tensor> {
    same_grid(features, &offsets.grid, "features and offsets")?;
    crate::tensor::sample_kv(features, &offsets.grid)
}

/// Attention of level `level`; returns `(8, h, w)` aggregated values.
pub fn attend_level(
    f_t: &Tensor,
    f_prev: &Tensor,
    offsets: &OffsetField,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    same_grid(f_t, f_prev, "current and previous features")?;
    same_grid(f_t, &offsets.grid, "features and offsets")?;
    let mut ctx = inference(weights, cfg);
    let a = ctx.g.constant(f_t.clone());
    let b = ctx.g.constant(f_prev.clone());
    let o = ctx.g.constant(offsets.grid.clone());
    let (v, _) = attend_level_graph(&mut ctx, cfg, offsets.level, a, b, o)?;
    Ok(ctx.g.take(v))
}

/// Attention weights `(groups, k, h, w)` of [`attend_level`].
pub fn attend_level_weights(
    f_t: &Tensor,
    f_prev: &Tensor,
    offsets: &OffsetField,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let mut ctx = inference(weights, cfg);
    let a = ctx.g.constant(f_t.clone());
    let b = ctx.g.constant(f_prev.clone());
    let o = ctx.g.constant(offsets.grid.clone());
    let (v, _) = attend_level_graph(&mut ctx, cfg, offsets.level, a, b, o)?;
    ctx.g.attention_weights(v)
}

/// Offsets at `level` from the coarser field at `level + 1`. The coarsest
/// level takes neither `v` nor `coarse`; every other level needs both.
pub fn refine_offsets(
    f_t: &Tensor,
    v: Option<&Tensor>,
    coarse: Option<&OffsetField>,
    level: usize,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<OffsetField> {
    let base = level == cfg.levels;
    let mut ctx = inference(weights, cfg);
    let f = ctx.g.constant(f_t.clone());
    let s = match (base, v, coarse) {
        (true, None, None) => refine_graph(&mut ctx, cfg, level, f, None)?,
        (false, Some(v), Some(c)) => {
            if c.level != level + 1 {
                return Err(Error::Contract(format!(
                    "coarse field is level {}, expected {}",
                    c.level,
                    level + 1
                )));
            }
            let vv = ctx.g.constant(v.clone());
            let cv = ctx.g.constant(c.grid.clone());
            let up = upscale_offsets_graph(&mut ctx, cv)?;
            refine_graph(&mut ctx, cfg, level, f, Some((vv, up)))?
        }
        (true, ..) => {
            return Err(Error::Contract(
                "the coarsest level takes no attention output or coarse field".into(),
            ))
        }
        (false, ..) => {
            return Err(Error::Contract(format!(
                "level {level} needs both the attention output and the coarse field"
            )))
        }
    };
    OffsetField::new(level, ctx.g.take(s))
}

/// Level-0 offsets of a frame pair from their feature pyramids.
pub fn pyramid(
    f_t: &crate::encoder::PyramidFeatures,
    f_prev: &crate::encoder::PyramidFeatures,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<OffsetField> {
    for (a, b) in f_t.levels.iter().zip(&f_prev.levels) {
        if a.dims() != b.dims() {
            return shape_err(format!("pyramid level {:?} vs {:?}", a.dims(), b.dims()));
        }
    }
    let mut ctx = inference(weights, cfg);
    let a: Vec<Var> = f_t.levels.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let b: Vec<Var> = f_prev.levels.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let (s0, _) = pyramid_graph(&mut ctx, cfg, &a, &b)?;
    OffsetField::new(0, ctx.g.take(s0))
}

/// Level-0 query embedding `W_Q f0`.
pub fn query_embedding(f0: &Tensor, weights: &ModelWeights, cfg: &ModelConfig) -> Result<Tensor> {
    let mut ctx = inference(weights, cfg);
    let f = ctx.g.constant(f0.clone());
    let q = ctx.conv(f, "dap.l0.q", 1, false)?;
    Ok(ctx.g.take(q))
}

/// Hidden-state fusion; returns `(n, H, W)`.
pub fn fuse_hidden(
    q0: &Tensor,
    h_prev: &Tensor,
    s0: &OffsetField,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    same_grid(q0, h_prev, "query and hidden state")?;
    same_grid(h_prev, &s0.grid, "hidden state and offsets")?;
    if h_prev.dims()[0] != cfg.n {
        return shape_err(format!("hidden state has {} channels, config n = {}", h_prev.dims()[0], cfg.n));
    }
    let mut ctx = inference(weights, cfg);
    let q = ctx.g.constant(q0.clone());
    let h = ctx.g.constant(h_prev.clone());
    let s = ctx.g.constant(s0.grid.clone());
    let v = fuse_hidden_graph(&mut ctx, cfg, Some(q), h, s)?;
    Ok(ctx.g.take(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode, Chain};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, dims: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    fn field(level: usize, k: usize, h: usize, w: usize, dx: f32, dy: f32) -> OffsetField {
        let grid = Tensor::from_fn(&[2 * k, h, w], |i| if (i / (h * w)) % 2 == 0 { dx } else { dy });
        OffsetField::new(level, grid).unwrap()
    }

    #[test]
    fn zero_offsets_replicate_features() {
        let f = rand_t(1, &[5, 6, 7]);
        let s = sample_kv(&f, &OffsetField::zeros(0, 4, 6, 7)).unwrap();
        assert_eq!(s.dims(), &[4, 5, 6, 7]);
        for i in 0..4 {
            assert_eq!(&s.data()[i * f.len()..(i + 1) * f.len()], f.data());
        }
    }

    #[test]
    fn fractional_shift_reads_ramp() {
        let f = Tensor::from_fn(&[1, 8, 12], |i| (i % 12) as f32);
        let s = sample_kv(&f, &field(0, 2, 8, 12, 1.5, 0.0)).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                assert!((s.data()[y * 12 + x] - (x as f32 + 1.5)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn coarse_offsets_double_when_refinement_is_zero() {
        let cfg = ModelConfig::toy();
        let w = ModelWeights::init(&cfg, 3).unwrap();
        let (d, k) = (cfg.d, cfg.k);
        let coarse = field(1, k, 4, 4, 1.0, 1.0);
        let s = refine_offsets(&rand_t(2, &[d, 8, 8]), Some(&rand_t(3, &[d, 8, 8])), Some(&coarse), 0, &w, &cfg)
            .unwrap();
        assert_eq!(s.grid.dims(), &[2 * k, 8, 8]);
        assert!(s.grid.data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn refine_contract_errors() {
        let cfg = ModelConfig::toy();
        let w = ModelWeights::init(&cfg, 3).unwrap();
        let f = rand_t(2, &[cfg.d, 8, 8]);
        let v = rand_t(3, &[cfg.d, 8, 8]);
        let top = cfg.levels;
        let c = field(top, cfg.k, 4, 4, 0.0, 0.0);
        let contract = |r: Result<OffsetField>| matches!(r, Err(Error::Contract(_)));
        assert!(contract(refine_offsets(&f, Some(&v), None, top, &w, &cfg)));
        assert!(contract(refine_offsets(&f, None, Some(&c), 0, &w, &cfg)));
        assert!(contract(refine_offsets(&f, Some(&v), None, 0, &w, &cfg)));
        let wrong = field(top + 1, cfg.k, 4, 4, 0.0, 0.0);
        assert!(contract(refine_offsets(&f, Some(&v), Some(&wrong), top - 1, &w, &cfg)));
        assert!(refine_offsets(&f, None, None, top, &w, &cfg).is_ok());
    }

    #[test]
    fn untrained_pyramid_gives_zero_offsets() {
        let cfg = ModelConfig::toy();
        let w = ModelWeights::init(&cfg, 9).unwrap();
        let a = encode(&rand_t(4, &[3, 16, 16]).map(|v| v.abs()), &w, &cfg, Chain::Current).unwrap();
        let b = encode(&rand_t(5, &[3, 16, 16]).map(|v| v.abs()), &w, &cfg, Chain::Previous).unwrap();
        let s0 = pyramid(&a, &b, &w, &cfg).unwrap();
        assert_eq!(s0.grid.dims(), &[2 * cfg.k, 16, 16]);
        assert!(s0.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_query_gives_uniform_weights() {
        let cfg = ModelConfig::toy();
        let mut w = ModelWeights::init(&cfg, 4).unwrap();
        w.zero_prefix("dap.l0.q");
        let f = rand_t(6, &[cfg.d, 6, 6]);
        let g = rand_t(7, &[cfg.d, 6, 6]);
        let off = field(0, cfg.k, 6, 6, 0.5, -0.25);
        let a = attend_level_weights(&f, &g, &off, &w, &cfg).unwrap();
        assert_eq!(a.dims(), &[cfg.groups, cfg.k, 6, 6]);
        assert!(a.data().iter().all(|&p| (p - 1.0 / cfg.k as f32).abs() < 1e-6));
    }

    #[test]
    fn grouped_hidden_values_with_identity_weights_pass_through() {
        let cfg = ModelConfig::dap(128);
        let mut w = ModelWeights::zeros(&cfg).unwrap();
        let per = cfg.n / cfg.groups;
        assert_eq!(w.get("hidden.v.weight").unwrap().dims(), &[128, 32, 1, 1]);
        let ident = Tensor::from_fn(&[cfg.n, per, 1, 1], |i| if i / per % per == i % per { 1.0 } else { 0.0 });
        w.insert("hidden.v.weight", ident);
        let h = rand_t(8, &[cfg.n, 4, 4]);
        let q = rand_t(9, &[cfg.d, 4, 4]);
        let out = fuse_hidden(&q, &h, &OffsetField::zeros(0, cfg.k, 4, 4), &w, &cfg).unwrap();
        assert!(out.max_abs_diff(&h) < 1e-6);
        let bad = rand_t(8, &[64, 4, 4]);
        assert!(fuse_hidden(&q, &bad, &OffsetField::zeros(0, cfg.k, 4, 4), &w, &cfg).is_err());
    }
}
