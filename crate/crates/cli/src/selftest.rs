//! `dap selftest`: gradient checks, attention normalization, pixel-shuffle
//! round trip and analyzer/instrumentation parity.

use std::path::Path;

use serde::Serialize;

use dap_core::config::ModelConfig;
use dap_core::counter;
use dap_core::dap::{attend_level_weights, OffsetField};
use dap_core::metrics::{analyze_complexity, SCHEMA_VERSION};
use dap_core::tensor::gradcheck::{gradcheck, OPS};
use dap_core::tensor::{pixel_shuffle, pixel_unshuffle};
use dap_core::trainer::model_gradcheck;
use dap_core::{step, HiddenState, ModelWeights, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Failure;

/// Environment switch for the conv-backward sign fault.
pub const FAULT_ENV: &str = "DAP_FAULT";

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn check(name: impl Into<String>, max_error: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

fn attention_normalization(rng: &mut ChaCha8Rng) -> Result<Check, Failure> {
    let cfg = ModelConfig::toy();
    let mut worst = 0.0f64;
    for i in 0..20 {
        let w = ModelWeights::init(&cfg, i)?;
        let (h, wd) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let level = rng.gen_range(0..cfg.levels);
        let f_t = rand_tensor(rng, &[cfg.d, h, wd], -1.0, 1.0);
        let f_p = rand_tensor(rng, &[cfg.d, h, wd], -1.0, 1.0);
        let off = OffsetField::new(level, rand_tensor(rng, &[2 * cfg.k, h, wd], -3.0, 3.0))?;
        let a = attend_level_weights(&f_t, &f_p, &off, &w, &cfg)?;
        let (g, k, plane) = (a.dims()[0], a.dims()[1], h * wd);
        for gi in 0..g {
            for p in 0..plane {
                let s: f64 = (0..k).map(|j| a.data()[(gi * k + j) * plane + p] as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    Ok(check("attention_weights_sum_to_one", worst, 1e-6))
}

fn shuffle_round_trip(rng: &mut ChaCha8Rng) -> Result<Check, Failure> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let r = rng.gen_range(1..5);
        let c = rng.gen_range(1..4) * r * r;
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        let back = pixel_unshuffle(&pixel_shuffle(&x, r)?, r)?;
        worst = worst.max(back.max_abs_diff(&x));
    }
    Ok(check("pixel_shuffle_round_trip", worst, 0.0))
}

fn analyzer_parity() -> Result<Check, Failure> {
    let mut configs = vec![ModelConfig::toy(), ModelConfig::dap(64), ModelConfig::dap(128)];
    configs.extend((1..=6).map(|r| ModelConfig::ablation(r).expect("rows 1-6 exist")));
    let mut worst = 0.0f64;
    for cfg in configs {
        let w = ModelWeights::init(&cfg, 0)?;
        let x = Tensor::from_fn(&[3, 8, 8], |i| (i % 13) as f32 / 13.0);
        counter::reset();
        step(&x, &x, &HiddenState::zeros(cfg.n, 8, 8), &w, &cfg)?;
        let c = counter::snapshot();
        let r = analyze_complexity(&cfg, 8, 8)?;
        let gaps = [
            (r.total_macs, c.macs),
            (r.total_exps, c.exps),
            (r.total_divs, c.divs),
            (r.total_sample_points, c.sample_points),
        ];
        for (a, b) in gaps {
            worst = worst.max(a.abs_diff(b) as f64);
        }
    }
    Ok(check("analyzer_matches_instrumentation", worst, 0.0))
}

/// Runs every check. Gradient checks use 64-bit ops at 1e-4 and the 32-bit
/// toy model at 1e-2.
pub fn report(seed: u64) -> Result<Report, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for (i, op) in OPS.iter().enumerate() {
        let r = gradcheck::<f64>(op, 4, 1e-4, seed.wrapping_add(i as u64))?;
        checks.push(check(format!("gradcheck_{op}"), r.max_rel_error, r.tolerance));
    }
    let m = model_gradcheck(&ModelConfig::toy(), 2, 4, 1, 1e-2, seed)?;
    checks.push(check("gradcheck_toy_model", m.max_rel_error, m.tolerance));
    checks.push(attention_normalization(&mut rng)?);
    checks.push(shuffle_round_trip(&mut rng)?);
    checks.push(analyzer_parity()?);
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(feature = "fault-injection")]
fn apply_fault_env() -> Result<(), Failure> {
    match std::env::var(FAULT_ENV).as_deref() {
        Ok("conv-backward-sign") => {
            dap_core::fault::set_conv_backward_flip(true);
            Ok(())
        }
        Ok(other) => Err(Failure::Args(format!("unknown fault `{other}`"))),
        Err(_) => Ok(()),
    }
}

#[cfg(not(feature = "fault-injection"))]
fn apply_fault_env() -> Result<(), Failure> {
    match std::env::var(FAULT_ENV) {
        Ok(_) => Err(Failure::Args(format!(
            "{FAULT_ENV} is set but this build has no fault injection"
        ))),
        Err(_) => Ok(()),
    }
}

pub fn run(out: Option<&Path>) -> Result<(), Failure> {
    apply_fault_env()?;
    let r = report(0)?;
    for c in &r.checks {
        println!(
            "{} {:<36} max_error {:.3e} tolerance {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_error,
            c.tolerance
        );
    }
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&r).expect("report serializes"))
            .map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
    }
    if r.passed {
        println!("selftest passed");
        Ok(())
    } else {
        let failed: Vec<_> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::Check(failed.join(", ")))
    }
}
