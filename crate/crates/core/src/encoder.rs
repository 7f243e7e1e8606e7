//! Multi-level feature encoder: `f0 = C0(x)`, `fl = down2(Cl(f(l-1)))`.

use crate::config::ModelConfig;
use crate::ctx::Ctx;
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Resize, Tensor, Var};
use crate::weights::ModelWeights;

/// Per-level feature maps of one frame, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures<T: Real = f32> {
    pub levels: Vec<Tensor<T>>,
}

/// Which of the two weight chains encodes a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Chain {
    Current,
    Previous,
}

impl Chain {
    pub fn key(self) -> &'static str {
        match self {
            Chain::Current => "t",
            Chain::Previous => "prev",
        }
    }
}

pub(crate) fn check_frame(dims: &[usize], divisor: usize) -> Result<(usize, usize)> {
    let [3, h, w] = *dims else {
        return shape_err(format!("frame must be (3,H,W), got {dims:?}"));
    };
    if h == 0 || w == 0 || h % divisor != 0 || w % divisor != 0 {
        return shape_err(format!("frame {h}x{w} is not divisible by {divisor}"));
    }
    Ok((h, w))
}

/// Encodes levels `0..=top` of `x` on the tape.
pub(crate) fn encode_graph<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    x: Var,
    chain: Chain,
    top: usize,
) -> Result<Vec<Var>> {
    let mut levels = Vec::with_capacity(top + 1);
    let mut f = x;
    for l in 0..=top {
        for i in 0..cfg.encoder_convs {
            let last = i + 1 == cfg.encoder_convs;
            f = ctx.conv(f, &format!("encoder.{}.l{l}.conv{i}", chain.key()), 1, !last)?;
        }
        if l > 0 {
            f = ctx.g.resize(f, Resize::Down2)?;
        }
        levels.push(f);
    }
    Ok(levels)
}

/// Feature pyramid of one frame: levels `0..=cfg.levels` for the current
/// frame, one fewer for the previous frame.
pub fn encode(
    frame: &Tensor,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    chain: Chain,
) -> Result<PyramidFeatures> {
    check_frame(frame.dims(), 1 << cfg.levels)?;
    frame.check_finite("frame")?;
    let mut ctx = Ctx::<f32>::new(weights, false, cfg.leaky_slope);
    let x = ctx.g.constant(frame.clone());
    let top = match chain {
        Chain::Current => cfg.levels,
        Chain::Previous => cfg.levels.saturating_sub(1),
    };
    let vars = encode_graph(&mut ctx, cfg, x, chain, top)?;
    Ok(PyramidFeatures {
        levels: vars.iter().map(|&v| ctx.g.value(v).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{bilinear_resize, conv2d, leaky_relu, ConvSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn level_shapes() {
        let cfg = ModelConfig::dap(64);
        let w = ModelWeights::init(&cfg, 0).unwrap();
        let p = encode(&frame(1, 16, 16), &w, &cfg, Chain::Current).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![8, 16, 16], vec![8, 8, 8], vec![8, 4, 4], vec![8, 2, 2]]);
        assert!(encode(&frame(1, 12, 16), &w, &cfg, Chain::Current).is_err());
    }

    #[test]
    fn zero_frame_gives_zero_pyramid() {
        let cfg = ModelConfig::dap(64);
        let w = ModelWeights::init(&cfg, 0).unwrap();
        let p = encode(&Tensor::zeros(&[3, 8, 8]), &w, &cfg, Chain::Previous).unwrap();
        assert!(p.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn matches_step_by_step_composition() {
        let cfg = ModelConfig::dap(64);
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let x = frame(2, 16, 24);
        let p = encode(&x, &w, &cfg, Chain::Current).unwrap();
        let mut f = x;
        for l in 0..=3 {
            for i in 0..4 {
                let pre = format!("encoder.t.l{l}.conv{i}");
                let wt = w.get(&format!("{pre}.weight")).unwrap();
                let spec = ConvSpec::new(wt.dims()[1], 8, 3);
                f = conv2d(&f, wt, Some(w.get(&format!("{pre}.bias")).unwrap()), &spec).unwrap();
                if i < 3 {
                    f = leaky_relu(&f, 0.1);
                }
            }
            if l > 0 {
                f = bilinear_resize(&f, Resize::Down2).unwrap();
            }
            assert_eq!(f, p.levels[l], "level {l}");
        }
    }

    #[test]
    fn chains_do_not_share_weights() {
        let cfg = ModelConfig::toy();
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let x = frame(3, 8, 8);
        let a = encode(&x, &w, &cfg, Chain::Current).unwrap();
        let b = encode(&x, &w, &cfg, Chain::Previous).unwrap();
        assert_eq!((a.levels.len(), b.levels.len()), (3, 2));
        assert_ne!(a.levels[..2], b.levels[..]);
        assert_eq!(a, encode(&x, &w, &cfg, Chain::Current).unwrap());
    }
}
