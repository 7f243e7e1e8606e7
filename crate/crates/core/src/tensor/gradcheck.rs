//! Central finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Real, Resize, Tensor, Var};
use crate::error::{Error, Result};

/// Ops that can be checked by id.
pub const OPS: &[&str] = &[
    "identity",
    "conv2d",
    "conv2d_7x7",
    "conv2d_grouped",
    "leaky_relu",
    "bilinear_resize_up",
    "bilinear_resize_down",
    "bilinear_sample",
    "sample_kv",
    "attention",
    "softmax",
    "pixel_shuffle",
    "nearest_upsample",
    "concat_slice",
    "add_scale",
    "smooth_l1",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub op: String,
    pub precision: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type BuildFn<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>;

struct Instance<T: Real> {
    inputs: Vec<Tensor<T>>,
    build: BuildFn<T>,
}

/// Inputs are snapped to this grid so `x +- eps` is exact.
const GRID: f64 = 4096.0;

fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::lit((rng.gen_range(lo..hi) * GRID).round() / GRID))
}

/// Values bounded away from zero, so leaky ReLU's kink is never crossed.
fn rand_nonzero<T: Real>(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<T> {
    Tensor::from_fn(dims, |_| {
        let m = rng.gen_range(0.05..1.0);
        let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        T::lit((s * m * GRID).round() / GRID)
    })
}

/// Offsets whose targets stay inside the image and away from lattice lines.
fn rand_offsets<T: Real>(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[2 * k, h, w]);
    let d = t.data_mut();
    for i in 0..k {
        for y in 0..h {
            for x in 0..w {
                let mut target = |len: usize| {
                    let cell = rng.gen_range(0..len - 1) as f64;
                    cell + (rng.gen_range(0.05..0.95) * GRID).round() / GRID
                };
                let tx = target(w);
                let ty = target(h);
                d[((2 * i) * h + y) * w + x] = T::lit(tx - x as f64);
                d[((2 * i + 1) * h + y) * w + x] = T::lit(ty - y as f64);
            }
        }
    }
    t
}

fn instance<T: Real>(op: &str, rng: &mut ChaCha8Rng) -> Result<Instance<T>> {
    let h = rng.gen_range(3..6);
    let w = rng.gen_range(3..6);
    let inst = match op {
        "identity" => Instance {
            inputs: vec![rand_tensor(rng, &[2, h, w], -1.0, 1.0)],
            build: Box::new(|g, v| g.identity(v[0])),
        },
        "conv2d" | "conv2d_7x7" => {
            let k = if op == "conv2d" { 3 } else { 7 };
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..4);
            Instance {
                inputs: vec![
                    rand_tensor(rng, &[cin, h, w], -1.0, 1.0),
                    rand_tensor(rng, &[cout, cin, k, k], -0.5, 0.5),
                    rand_tensor(rng, &[cout], -0.5, 0.5),
                ],
                build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1)),
            }
        }
        "conv2d_grouped" => Instance {
            inputs: vec![
                rand_tensor(rng, &[2, 4, h, w], -1.0, 1.0),
                rand_tensor(rng, &[4, 2, 1, 1], -0.5, 0.5),
                rand_tensor(rng, &[4], -0.5, 0.5),
            ],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2)),
        },
        "leaky_relu" => Instance {
            inputs: vec![rand_nonzero(rng, &[2, h, w])],
            build: Box::new(|g, v| g.leaky_relu(v[0], T::lit(super::LEAKY_SLOPE))),
        },
        "bilinear_resize_up" => Instance {
            inputs: vec![rand_tensor(rng, &[2, h, w], -1.0, 1.0)],
            build: Box::new(|g, v| g.resize(v[0], Resize::Up2)),
        },
        "bilinear_resize_down" => Instance {
            inputs: vec![rand_tensor(rng, &[2, 2 * h, 2 * w], -1.0, 1.0)],
            build: Box::new(|g, v| g.resize(v[0], Resize::Down2)),
        },
        "bilinear_sample" | "sample_kv" => {
            let (c, k) = if op == "bilinear_sample" { (1, 1) } else { (3, 4) };
            Instance {
                inputs: vec![
                    rand_tensor(rng, &[c, h, w], -1.0, 1.0),
                    rand_offsets(rng, k, h, w),
                ],
                build: Box::new(|g, v| g.sample(v[0], v[1])),
            }
        }
        "attention" => Instance {
            inputs: vec![
                rand_tensor(rng, &[8, h, w], -1.0, 1.0),
                rand_tensor(rng, &[4, 8, h, w], -1.0, 1.0),
                rand_tensor(rng, &[4, 8, h, w], -1.0, 1.0),
            ],
            build: Box::new(|g, v| g.attention(v[0], v[1], v[2], 4, T::lit(1.0 / 8f64.sqrt()))),
        },
        "softmax" => Instance {
            inputs: vec![rand_tensor(rng, &[8], -2.0, 2.0)],
            build: Box::new(|g, v| g.softmax(v[0], T::lit(0.7))),
        },
        "pixel_shuffle" => Instance {
            inputs: vec![rand_tensor(rng, &[8, h, w], -1.0, 1.0)],
            build: Box::new(|g, v| g.pixel_shuffle(v[0], 2)),
        },
        "nearest_upsample" => Instance {
            inputs: vec![rand_tensor(rng, &[2, h, w], -1.0, 1.0)],
            build: Box::new(|g, v| g.nearest_upsample(v[0], 2)),
        },
        "concat_slice" => Instance {
            inputs: vec![
                rand_tensor(rng, &[2, h, w], -1.0, 1.0),
                rand_tensor(rng, &[3, h, w], -1.0, 1.0),
            ],
            build: Box::new(|g, v| {
                let c = g.concat(&[v[0], v[1]])?;
                g.slice_channels(c, 1, 3)
            }),
        },
        "add_scale" => Instance {
            inputs: vec![
                rand_tensor(rng, &[2, h, w], -1.0, 1.0),
                rand_tensor(rng, &[2, h, w], -1.0, 1.0),
            ],
            build: Box::new(|g, v| {
                let s = g.add(v[0], v[1])?;
                g.scale(s, T::lit(2.0))
            }),
        },
        "smooth_l1" => {
            let pred: Tensor<T> = rand_tensor(rng, &[2, h, w], -0.1, 0.1);
            // Keep every residual away from the |e| = beta seam.
            let mut target = pred.clone();
            for p in target.data_mut() {
                let e = rng.gen_range(0.0005..0.009) + if rng.gen_bool(0.5) { 0.0 } else { 0.02 };
                *p += T::lit(if rng.gen_bool(0.5) { e } else { -e });
            }
            Instance {
                inputs: vec![pred, target],
                build: Box::new(|g, v| g.smooth_l1(v[0], v[1], T::lit(0.01))),
            }
        }
        other => return Err(Error::UnknownOp(other.to_string())),
    };
    Ok(inst)
}

fn forward<T: Real>(inst: &Instance<T>, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (inst.build)(&mut g, &vars)?;
    Ok(g.take(out))
}

/// Maximum relative error of one random instance.
fn check_instance<T: Real>(inst: &Instance<T>, rng: &mut ChaCha8Rng, eps: f64, coords: usize) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (inst.build)(&mut g, &vars)?;
    let n_out = g.value(out).len();
    let cot: Vec<T> = (0..n_out)
        .map(|_| T::lit((rng.gen_range(-1.0..1.0) * GRID).round() / GRID))
        .collect();
    g.backward_with(out, cot.clone())?;

    let mut worst = 0.0f64;
    for (idx, var) in vars.iter().enumerate() {
        let analytic: Vec<T> = g.grad(*var).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); inst.inputs[idx].len()]);
        let len = inst.inputs[idx].len();
        let picks: Vec<usize> = if len <= coords {
            (0..len).collect()
        } else {
            (0..coords).map(|_| rng.gen_range(0..len)).collect()
        };
        for j in picks {
            let mut plus = inst.inputs.to_vec();
            let mut minus = inst.inputs.to_vec();
            plus[idx].data_mut()[j] += T::lit(eps);
            minus[idx].data_mut()[j] -= T::lit(eps);
            let fp = forward(inst, &plus)?;
            let fm = forward(inst, &minus)?;
            let diff: T = fp
                .data()
                .iter()
                .zip(fm.data())
                .zip(&cot)
                .map(|((&a, &b), &c)| (a - b) * c)
                .sum();
            let numeric = diff.as_f64() / (2.0 * eps);
            let a = analytic[j].as_f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Runs `trials` random instances of `op` and compares analytic gradients
/// against central differences. `T` selects the precision.
pub fn gradcheck<T: Real>(op: &str, trials: usize, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let single = std::mem::size_of::<T>() == 4;
    let eps = if single { 1.0 / 1024.0 } else { 1.0 / 65536.0 };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let inst = instance::<T>(op, &mut rng)?;
        worst = worst.max(check_instance(&inst, &mut rng, eps, 24)?);
    }
    Ok(GradcheckReport {
        op: op.to_string(),
        precision: if single { "f32" } else { "f64" }.into(),
        trials,
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}
