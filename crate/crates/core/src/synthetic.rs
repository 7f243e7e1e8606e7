//! Translating-checkerboard videos for tests and toy training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::{degrade, DegradeSpec};
use crate::error::Result;
use crate::tensor::Tensor;

/// An aligned LR/HR clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub lr: Vec<Tensor>,
    pub hr: Vec<Tensor>,
}

/// A checkerboard whose squares each carry an independent random colour, so
/// the pattern has no period.
#[derive(Clone, Debug)]
pub struct Checkerboard {
    pub square: f64,
    seed: u64,
}

impl Checkerboard {
    pub fn new(square: f64, seed: u64) -> Self {
        Self { square, seed }
    }

    fn colour(&self, i: i64, j: i64) -> [f32; 3] {
        let mix = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ self.seed.wrapping_mul(0x1656_67B1_9E37_79F9);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
    }

    /// Renders the `h x w` window whose top-left corner sits at `(oy, ox)`,
    /// box-filtering each pixel over a 4x4 grid of subsamples.
    pub fn render(&self, h: usize, w: usize, oy: f64, ox: f64) -> Tensor {
        const SUB: usize = 4;
        let mut out = vec![0.0f32; 3 * h * w];
        let norm = 1.0 / (SUB * SUB) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let py = oy + y as f64 + (sy as f64 + 0.5) / SUB as f64;
                        let px = ox + x as f64 + (sx as f64 + 0.5) / SUB as f64;
                        let c = self.colour((py / self.square).floor() as i64, (px / self.square).floor() as i64);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                for k in 0..3 {
                    out[(k * h + y) * w + x] = acc[k] * norm;
                }
            }
        }
        Tensor::from_vec_unchecked(&[3, h, w], out).expect("dims match")
    }
}

/// HR frames `x_t(p) = base(p + t v)`, with `v = (vx, vy)` in HR pixels per
/// frame; content found at `p` in frame `t` sits at `p + v` in frame `t-1`.
pub fn translating_sequence(board: &Checkerboard, frames: usize, h: usize, w: usize, v: (f64, f64)) -> Vec<Tensor> {
    (0..frames)
        .map(|t| board.render(h, w, v.1 * t as f64, v.0 * t as f64))
        .collect()
}

/// Generation settings for a random synthetic dataset.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub sequences: usize,
    pub frames: usize,
    pub lr_size: (usize, usize),
    /// Largest speed per axis, HR pixels per frame.
    pub max_speed: f64,
    pub square: (f64, f64),
    pub degrade: DegradeSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sequences: 16,
            frames: 8,
            lr_size: (16, 16),
            max_speed: 10.0,
            square: (16.0, 32.0),
            degrade: DegradeSpec::default(),
        }
    }
}

/// Degrades every HR frame of a clip.
pub fn pair(hr: Vec<Tensor>, spec: &DegradeSpec) -> Result<Sequence> {
    let lr = hr.iter().map(|f| degrade(f, spec)).collect::<Result<_>>()?;
    Ok(Sequence { lr, hr })
}

/// Clips with random square sizes and random sub-pixel velocities.
pub fn dataset(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Sequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.degrade.scale;
    let (h, w) = (spec.lr_size.0 * s, spec.lr_size.1 * s);
    (0..spec.sequences)
        .map(|_| {
            let board = Checkerboard::new(rng.gen_range(spec.square.0..spec.square.1), rng.gen());
            let v = (
                rng.gen_range(-spec.max_speed..=spec.max_speed),
                rng.gen_range(-spec.max_speed..=spec.max_speed),
            );
            pair(translating_sequence(&board, spec.frames, h, w, v), &spec.degrade)
        })
        .collect()
}

/// A clip with a fixed velocity in LR pixels per frame.
pub fn global_translation(seed: u64, frames: usize, lr_size: (usize, usize), v_lr: (f64, f64), spec: &DegradeSpec) -> Result<Sequence> {
    let s = spec.scale;
    let board = Checkerboard::new(8.0, seed);
    let v = (v_lr.0 * s as f64, v_lr.1 * s as f64);
    pair(translating_sequence(&board, frames, lr_size.0 * s, lr_size.1 * s, v), spec)
}

/// The same frame repeated.
pub fn constant_sequence(frames: usize, lr_size: (usize, usize), value: f32, spec: &DegradeSpec) -> Result<Sequence> {
    let s = spec.scale;
    let f = Tensor::full(&[3, lr_size.0 * s, lr_size.1 * s], value);
    pair(vec![f; frames], spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_translation_shifts_content() {
        let b = Checkerboard::new(7.0, 3);
        let seq = translating_sequence(&b, 2, 20, 24, (3.0, 0.0));
        for y in 0..20 {
            for x in 0..21 {
                // x_1(p) = x_0(p + v)
                assert_eq!(seq[1].at3(0, y, x), seq[0].at3(0, y, x + 3));
            }
        }
    }

    #[test]
    fn dataset_is_seeded() {
        let spec = SyntheticSpec { sequences: 2, frames: 3, ..Default::default() };
        let a = dataset(&spec, 1).unwrap();
        assert_eq!(a, dataset(&spec, 1).unwrap());
        assert_ne!(a, dataset(&spec, 2).unwrap());
        assert_eq!(a[0].lr[0].dims(), &[3, 16, 16]);
        assert_eq!(a[0].hr[0].dims(), &[3, 64, 64]);
    }
}
