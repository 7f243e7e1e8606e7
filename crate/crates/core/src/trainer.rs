//! Smooth-L1 training with Adam, global-norm clipping, full backpropagation
//! through each unroll, a two-step plateau schedule and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{step, step_graph, HiddenState};
use crate::config::ModelConfig;
use crate::ctx::Ctx;
use crate::degrade::Augment;
use crate::error::{shape_err, Error, Result};
use crate::synthetic::Sequence;
use crate::tensor::{Real, Tensor, Var};
use crate::weights::ModelWeights;

/// Per-tensor gradients keyed by weight name.
pub type Grads = BTreeMap<String, Vec<f32>>;

/// Mean smooth-L1 distance: `0.5 e^2 / beta` below `beta`, `|e| - beta / 2`
/// above.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64) -> Result<f64> {
    if pred.dims() != target.dims() {
        return shape_err(format!("smooth_l1 {:?} vs {:?}", pred.dims(), target.dims()));
    }
    if beta <= 0.0 {
        return Err(Error::Config(format!("beta {beta} must be positive")));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let e = (a as f64 - b as f64).abs();
            if e < beta {
                0.5 * e * e / beta
            } else {
                e - 0.5 * beta
            }
        })
        .sum();
    Ok(sum / pred.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update. Tensors without a gradient entry are left
/// alone; a non-finite gradient aborts before anything is modified.
pub fn adam_step(
    weights: &mut ModelWeights,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    adam_step_scaled(weights, grads, state, lr, hyper, &|_| 1.0)
}

/// [`adam_step`] with the rate of each tensor multiplied by `scale(name)`.
pub fn adam_step_scaled(
    weights: &mut ModelWeights,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
    scale: &dyn Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads {
        let w = weights.get(name)?;
        if w.len() != g.len() {
            return Err(Error::NamedShape {
                name: name.clone(),
                expected: w.dims().to_vec(),
                found: vec![g.len()],
            });
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in `{name}` at element {i}: {}",
                g[i]
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let lr = lr * scale(name);
        let w = weights.get_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (i, p) in w.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hyper.eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    Ok(())
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// Optimization settings. `lr_schedule` holds the initial rate and the two
/// plateau reductions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(alias = "T")]
    pub unroll: usize,
    pub batch: usize,
    pub lr_schedule: Vec<f64>,
    /// Evaluations without an improvement of `plateau_min_delta` before the
    /// rate drops.
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    /// Steps averaged into one plateau evaluation.
    pub eval_every: usize,
    pub beta: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub augment: bool,
    /// Multiplies the rate of the offset-prediction layers.
    pub offset_lr_scale: f64,
    /// HR crop side; `None` keeps whole frames.
    pub crop_size: Option<usize>,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            unroll: 10,
            batch: 32,
            lr_schedule: vec![1e-4, 5e-5, 1e-5],
            plateau_patience: 20,
            plateau_min_delta: 1e-4,
            eval_every: 10,
            beta: 1e-2,
            clip_norm: 1.0,
            seed: 0,
            max_steps: 100_000,
            checkpoint_every: 1000,
            augment: true,
            offset_lr_scale: 1.0,
            crop_size: Some(256),
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    /// Settings of the toy run: 3-frame unrolls of whole 16x16 clips.
    /// Flips and rotations move the BD sampling phase (LR pixel `i` sits over
    /// HR pixel `4i` before a flip and `4i + 3` after), so they are off. The
    /// offset layers step at a tenth of the base rate; at the full rate they
    /// run into the clamp, where sampling passes no gradient back.
    pub fn toy() -> Self {
        Self {
            unroll: 3,
            batch: 2,
            lr_schedule: vec![1e-3, 5e-4, 1e-4],
            plateau_patience: 50,
            offset_lr_scale: 0.1,
            max_steps: 2000,
            checkpoint_every: 500,
            augment: false,
            crop_size: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.unroll < 2 {
            return bad(format!("unroll length {} must be at least 2", self.unroll));
        }
        if self.batch == 0 || self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("batch, eval_every and checkpoint_every must be positive".into());
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if !(self.offset_lr_scale > 0.0) {
            return bad(format!("offset_lr_scale {} must be positive", self.offset_lr_scale));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.lr_schedule.len() != 3 || self.lr_schedule.iter().any(|&r| !(r > 0.0)) {
            return bad("lr_schedule needs three positive rates".into());
        }
        Ok(())
    }
}

/// Steps through the rates in `schedule` when the monitored loss stalls.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    schedule: Vec<f64>,
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
    stage: usize,
}

impl Plateau {
    pub fn new(schedule: &[f64], patience: usize, min_delta: f64) -> Self {
        Self {
            schedule: schedule.to_vec(),
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
            stage: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule[self.stage]
    }

    pub fn reductions(&self) -> usize {
        self.stage
    }

    /// Feeds one evaluation; returns true when the rate dropped.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience && self.stage + 1 < self.schedule.len() {
            self.stage += 1;
            self.stale = 0;
            self.best = loss;
            return true;
        }
        false
    }
}

fn check_clip(lr: &[Tensor], hr: &[Tensor], cfg: &ModelConfig) -> Result<()> {
    if lr.len() != hr.len() || lr.is_empty() {
        return shape_err(format!("{} LR frames vs {} HR frames", lr.len(), hr.len()));
    }
    for (a, b) in lr.iter().zip(hr) {
        let (c, h, w) = a.chw()?;
        if b.dims() != [c, h * cfg.scale, w * cfg.scale] || a.dims() != lr[0].dims() {
            return shape_err(format!("LR frame {:?} does not match HR frame {:?}", a.dims(), b.dims()));
        }
    }
    Ok(())
}

/// Summed per-frame loss of one unroll from a zero hidden state, recorded
/// on `ctx`. The first frame serves as its own predecessor.
pub(crate) fn unroll_loss<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    lr: &[Tensor],
    hr: &[Tensor],
    beta: f64,
) -> Result<Var> {
    let (_, h, w) = lr[0].chw()?;
    let mut hidden = ctx.g.constant(Tensor::<T>::zeros(&[cfg.n, h, w]));
    let mut prev = ctx.g.constant(lr[0].cast());
    let mut total: Option<Var> = None;
    for (x, y) in lr.iter().zip(hr) {
        let x = ctx.g.constant(x.cast());
        let out = step_graph(ctx, cfg, x, prev, hidden)?;
        let target = ctx.g.constant(y.cast());
        let l = ctx.g.smooth_l1(out.y, target, T::lit(beta))?;
        total = Some(match total {
            Some(t) => ctx.g.add(t, l)?,
            None => l,
        });
        hidden = out.h;
        prev = x;
    }
    Ok(total.expect("non-empty clip"))
}

/// Loss and weight gradients of one clip.
pub fn clip_loss_and_grads(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    lr: &[Tensor],
    hr: &[Tensor],
    beta: f64,
) -> Result<(f64, Grads)> {
    check_clip(lr, hr, cfg)?;
    let mut ctx = Ctx::<f32>::new(weights, true, cfg.leaky_slope);
    let loss = unroll_loss(&mut ctx, cfg, lr, hr, beta)?;
    let value = ctx.g.value(loss).item() as f64;
    ctx.g.backward(loss)?;
    Ok((value, ctx.weight_grads()))
}

/// Loss of one clip without recording gradients.
pub fn clip_loss(weights: &ModelWeights, cfg: &ModelConfig, lr: &[Tensor], hr: &[Tensor], beta: f64) -> Result<f64> {
    check_clip(lr, hr, cfg)?;
    let (_, h, w) = lr[0].chw()?;
    let mut hidden = HiddenState::zeros(cfg.n, h, w);
    let mut total = 0.0;
    for (i, (x, y)) in lr.iter().zip(hr).enumerate() {
        let prev = &lr[i.saturating_sub(1)];
        let out = step(x, prev, &hidden, weights, cfg)?;
        total += smooth_l1(&out.y, y, beta)?;
        hidden = out.hidden;
    }
    Ok(total)
}

/// One training example: an augmented window of `unroll` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub lr: Vec<Tensor>,
    pub hr: Vec<Tensor>,
}

/// Draws the clips of one step.
pub fn sample_batch(data: &[Sequence], cfg: &ModelConfig, tc: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Clip>> {
    (0..tc.batch)
        .map(|_| {
            let seq = &data[rng.gen_range(0..data.len())];
            let start = rng.gen_range(0..=seq.lr.len() - tc.unroll);
            let lr = &seq.lr[start..start + tc.unroll];
            let hr = &seq.hr[start..start + tc.unroll];
            let seed: u64 = rng.gen();
            let (_, h, w) = hr[0].chw()?;
            let crop = tc.crop_size.unwrap_or(h.min(w));
            if !tc.augment && crop == h && crop == w {
                return Ok(Clip { lr: lr.to_vec(), hr: hr.to_vec() });
            }
            let a = Augment::draw(seed, h, w, crop, cfg.scale, tc.augment)?;
            Ok(Clip {
                lr: a.apply_sequence(lr, cfg.scale),
                hr: a.apply_sequence(hr, 1),
            })
        })
        .collect()
}

/// Mean clip loss and mean gradients over a batch.
pub fn batch_loss_and_grads(weights: &ModelWeights, cfg: &ModelConfig, batch: &[Clip], beta: f64) -> Result<(f64, Grads)> {
    let mut loss = 0.0;
    let mut acc: Grads = BTreeMap::new();
    for clip in batch {
        let (l, g) = clip_loss_and_grads(weights, cfg, &clip.lr, &clip.hr, beta)?;
        loss += l;
        for (name, gv) in g {
            match acc.get_mut(&name) {
                Some(a) => a.iter_mut().zip(&gv).for_each(|(x, y)| *x += y),
                None => {
                    acc.insert(name, gv);
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    acc.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= inv);
    Ok((loss / batch.len() as f64, acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// `step,loss,lr` rows.
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for e in log {
        let _ = writeln!(s, "{},{:e},{:e}", e.step, e.loss, e.lr);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

fn check_dataset(data: &[Sequence], cfg: &ModelConfig, tc: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    for (i, s) in data.iter().enumerate() {
        check_clip(&s.lr, &s.hr, cfg)?;
        if s.lr.len() < tc.unroll {
            return shape_err(format!("sequence {i} has {} frames, unroll needs {}", s.lr.len(), tc.unroll));
        }
        crate::encoder::check_frame(s.lr[0].dims(), cfg.divisor())?;
    }
    Ok(())
}

/// Trains from `init` (fresh weights from `tc.seed` when absent). With an
/// output directory, checkpoints and `loss.csv` are written there; a
/// non-finite loss saves `last_good.dapw` and aborts.
pub fn train(
    data: &[Sequence],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    init: Option<ModelWeights>,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    check_dataset(data, cfg, tc)?;
    let mut weights = match init {
        Some(w) => {
            w.validate(cfg)?;
            w
        }
        None => ModelWeights::init(cfg, tc.seed)?,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696E);
    let mut adam = AdamState::default();
    let mut plateau = Plateau::new(&tc.lr_schedule, tc.plateau_patience, tc.plateau_min_delta);
    let mut log = Vec::with_capacity(tc.max_steps);
    let mut checkpoints = Vec::new();
    let mut window = 0.0;
    for step in 0..tc.max_steps {
        let batch = sample_batch(data, cfg, tc, &mut rng)?;
        let (loss, mut grads) = batch_loss_and_grads(&weights, cfg, &batch, tc.beta)?;
        if !loss.is_finite() {
            let mut msg = format!("non-finite loss at step {step}");
            if let Some(dir) = out_dir {
                let p = dir.join("last_good.dapw");
                weights.save(&p)?;
                std::fs::write(dir.join("loss.csv"), loss_csv(&log))?;
                let _ = write!(msg, "; last good weights in {}", p.display());
            }
            return Err(Error::Numeric(msg));
        }
        let lr = plateau.lr();
        clip_gradients(&mut grads, tc.clip_norm);
        let offset_scale = tc.offset_lr_scale;
        let scale = move |name: &str| if name.contains(".offset.") { offset_scale } else { 1.0 };
        adam_step_scaled(&mut weights, &grads, &mut adam, lr, &tc.adam, &scale)?;
        let entry = StepLog { step, loss, lr };
        on_step(&entry);
        log.push(entry);
        window += loss;
        if (step + 1) % tc.eval_every == 0 {
            plateau.observe(window / tc.eval_every as f64);
            window = 0.0;
        }
        if let Some(dir) = out_dir {
            if (step + 1) % tc.checkpoint_every == 0 || step + 1 == tc.max_steps {
                let p = dir.join(format!("ckpt_{:06}.dapw", step + 1));
                weights.save(&p)?;
                checkpoints.push(p);
                std::fs::write(dir.join("loss.csv"), loss_csv(&log))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        weights.save(dir.join("final.dapw"))?;
        std::fs::write(dir.join("loss.csv"), loss_csv(&log))?;
    }
    Ok(TrainOutcome {
        weights,
        log,
        checkpoints,
    })
}

/// Outcome of the whole-model gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGradcheckReport {
    pub config: String,
    pub instances: usize,
    pub groups_checked: usize,
    pub max_rel_error: f64,
    pub worst_group: String,
    pub tolerance: f64,
    pub passed: bool,
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    u.into_iter().map(|x| x / norm).collect()
}

fn perturbed_loss(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    clip: &Clip,
    beta: f64,
    name: &str,
    dir: &[f64],
    eps: f64,
) -> Result<f64> {
    let base = weights.get(name)?;
    let moved = Tensor::<f64>::from_fn(base.dims(), |i| base.data()[i] as f64 + eps * dir[i]);
    let mut ctx = Ctx::<f64>::new(weights, true, cfg.leaky_slope);
    ctx.bind(name, moved)?;
    let l = unroll_loss(&mut ctx, cfg, &clip.lr, &clip.hr, beta)?;
    Ok(ctx.g.value(l).item())
}

fn central_difference(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    clip: &Clip,
    beta: f64,
    name: &str,
    dir: &[f64],
    eps: f64,
) -> Result<f64> {
    let plus = perturbed_loss(weights, cfg, clip, beta, name, dir, eps)?;
    let minus = perturbed_loss(weights, cfg, clip, beta, name, dir, -eps)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Compares 32-bit analytic gradients of an unrolled model against 64-bit
/// central differences along one random direction per weight tensor.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    unroll: usize,
    lr_size: usize,
    instances: usize,
    tolerance: f64,
    seed: u64,
) -> Result<ModelGradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = 1e-2;
    let eps = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut groups = 0;
    for inst in 0..instances {
        let mut weights = ModelWeights::init(cfg, seed.wrapping_add(inst as u64))?;
        // Non-zero final offset layers, so sampling sits off the lattice.
        for (name, t) in weights.iter_mut() {
            if name.contains(".offset.") || name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
            }
        }
        let s = lr_size * cfg.scale;
        let clip = Clip {
            lr: (0..unroll)
                .map(|_| Tensor::from_fn(&[3, lr_size, lr_size], |_| rng.gen_range(0.0..1.0)))
                .collect(),
            hr: (0..unroll)
                .map(|_| Tensor::from_fn(&[3, s, s], |_| rng.gen_range(0.0..1.0)))
                .collect(),
        };
        let (_, grads) = clip_loss_and_grads(&weights, cfg, &clip.lr, &clip.hr, beta)?;
        for name in weights.names().map(str::to_string).collect::<Vec<_>>() {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("no gradient reached `{name}`")))?;
            // A stencil that straddles a kink (leaky ReLU, sampling lattice,
            // clamp) shows up as disagreement between two step sizes; such a
            // direction is redrawn. The analytic value plays no part in this.
            let mut tries = 0;
            let (dir, numeric) = loop {
                let dir = unit_direction(&mut rng, g.len());
                let coarse = central_difference(&weights, cfg, &clip, beta, &name, &dir, eps)?;
                let fine = central_difference(&weights, cfg, &clip, beta, &name, &dir, eps / 2.0)?;
                let spread = (coarse - fine).abs() / coarse.abs().max(fine.abs()).max(1e-8);
                tries += 1;
                if spread < tolerance / 4.0 || tries == 4 {
                    break (dir, fine);
                }
            };
            let analytic: f64 = g.iter().zip(&dir).map(|(&a, &b)| a as f64 * b).sum();
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if err >= worst.0 {
                worst = (err, name.clone());
            }
            groups += 1;
        }
    }
    Ok(ModelGradcheckReport {
        config: cfg.name.clone(),
        instances,
        groups_checked: groups,
        max_rel_error: worst.0,
        worst_group: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    })
}
