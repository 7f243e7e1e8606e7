//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use dap_core::analysis::{offset_histograms, propagation_study, read_offset_dumps, write_offset_dump, HistogramSpec};
use dap_core::cell::{run_sequence, Direction, RunOptions};
use dap_core::degrade::{degrade, DegradeMode, DegradeSpec};
use dap_core::metrics::{analyze_complexity, profile_runtime, quantize_frame, ColorSpace, MetricReport, SCHEMA_VERSION};
use dap_core::synthetic::{dataset, global_translation, Sequence, SyntheticSpec};
use dap_core::tensor::gradcheck::{gradcheck, OPS};
use dap_core::trainer::{model_gradcheck, train, TrainConfig};
use dap_core::{Error, ModelConfig, ModelWeights, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frames::{list_frames, read_sequence, write_frame, LazyFrames};
use crate::{
    AnalyzeArgs, Command, DegradeArgs, DegradeModeArg, Failure, GradcheckArgs, MetricsArgs, ModeArg, ModelArgs,
    ProfileArgs, PropagateArgs, SpaceArg, SrArgs, SynthArgs, TrainArgs,
};

pub fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Sr(a) => sr(&a),
        Command::Degrade(a) => degrade_dir(&a),
        Command::Metrics(a) => metrics(&a),
        Command::Profile(a) => profile(&a),
        Command::TrainToy(a) => train_toy(&a),
        Command::Synth(a) => synth(&a),
        Command::AnalyzeOffsets(a) => analyze_offsets(&a),
        Command::Propagate(a) => propagate(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::Selftest(a) => crate::selftest::run(a.out.as_deref()),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Shape(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

/// The configuration sidecar of a weights file.
pub fn sidecar(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn load_model(args: &ModelArgs) -> Result<(ModelConfig, ModelWeights), Failure> {
    let cfg_path = args.config.clone().unwrap_or_else(|| sidecar(&args.weights));
    let cfg: ModelConfig = read_json(&cfg_path)?;
    cfg.validate()?;
    let weights = ModelWeights::load(&args.weights, &cfg)?;
    Ok((cfg, weights))
}

/// Writes weights plus their configuration sidecar.
pub fn save_model(path: &Path, weights: &ModelWeights, cfg: &ModelConfig) -> Result<(), Failure> {
    weights.save(path)?;
    write_text(&sidecar(path), &to_json(cfg))
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sr(a: &SrArgs) -> Result<(), Failure> {
    let (cfg, weights) = load_model(&a.model)?;
    let paths = list_frames(&a.input)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let names: Vec<String> = paths.iter().map(|p| file_stem(p)).collect();
    let opts = RunOptions {
        direction: match a.mode {
            ModeArg::Forward => Direction::Forward,
            ModeArg::Reverse => Direction::Reverse,
        },
        reinit_every: a.reinit_every,
    };
    let mut source = LazyFrames::new(paths);
    let mut scored = Vec::new();
    let mut failure = None;
    let start = Instant::now();
    let mut last = start;
    let mut emit = |t: usize, out: dap_core::StepOutput| -> dap_core::Result<()> {
        let result = (|| {
            out.y.check_finite("output frame")?;
            let path = a.out.join(format!("{}{}.png", names[t], a.suffix));
            write_frame(&path, &out.y)?;
            if let Some(dir) = &a.dump_offsets {
                let field = out.offsets.as_ref().ok_or_else(|| {
                    Failure::Shape(format!("configuration `{}` predicts no offsets to dump", cfg.name))
                })?;
                write_offset_dump(dir, t, field, cfg.scale)?;
            }
            if a.gt.is_some() {
                scored.push(if a.float_metrics { out.y.clone() } else { quantize_frame(&out.y) });
            }
            let now = Instant::now();
            println!("frame {t} {} {:.2} ms", names[t], (now - last).as_secs_f64() * 1e3);
            last = now;
            Ok::<(), Failure>(())
        })();
        result.map_err(|f| {
            let msg = f.to_string();
            failure = Some(f);
            Error::State(msg)
        })
    };
    let run = run_sequence(&mut source, &weights, &cfg, opts, &mut emit);
    if let Some(f) = failure {
        return Err(f);
    }
    let total = run?;
    let secs = start.elapsed().as_secs_f64();
    println!("total {total} frames {:.3} s {:.3} fps", secs, total as f64 / secs);
    if let Some(gt_dir) = &a.gt {
        let (_, gt) = read_sequence(gt_dir)?;
        let report = MetricReport::compute(&gt, &scored, ColorSpace::Y, 0)?;
        println!("{}", to_json(&report));
    }
    Ok(())
}

fn degrade_dir(a: &DegradeArgs) -> Result<(), Failure> {
    let spec = DegradeSpec {
        mode: match a.mode {
            DegradeModeArg::Bd => DegradeMode::Bd,
            DegradeModeArg::Bi => DegradeMode::Bi,
        },
        sigma: a.sigma,
        kernel_size: a.ksize,
        scale: a.scale,
    };
    let (paths, frames) = read_sequence(&a.input)?;
    for (p, f) in paths.iter().zip(&frames) {
        let lr = degrade(f, &spec)?;
        write_frame(&a.out.join(p.file_name().expect("listed files have names")), &lr)?;
    }
    println!("{} frames degraded into {}", frames.len(), a.out.display());
    Ok(())
}

fn metrics(a: &MetricsArgs) -> Result<(), Failure> {
    let (_, gt) = read_sequence(&a.gt)?;
    let (_, pred) = read_sequence(&a.pred)?;
    let space = match a.space {
        SpaceArg::Y => ColorSpace::Y,
        SpaceArg::Rgb => ColorSpace::Rgb,
    };
    let report = MetricReport::compute(&gt, &pred, space, a.crop_border)?;
    let text = to_json(&report);
    if let Some(p) = &a.json {
        write_text(p, &text)?;
    }
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv())?;
    }
    println!("{text}");
    Ok(())
}

fn profile(a: &ProfileArgs) -> Result<(), Failure> {
    let cfg: ModelConfig = read_json(&a.config)?;
    cfg.validate()?;
    let complexity = analyze_complexity(&cfg, a.height, a.width)?;
    let mut single = None;
    let mut parallel = None;
    if !a.no_timing {
        let weights = match &a.weights {
            Some(p) => ModelWeights::load(p, &cfg)?,
            None => ModelWeights::init(&cfg, 0)?,
        };
        let (h, w) = (complexity.padded_dims[1], complexity.padded_dims[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frames: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0)))
            .collect();
        single = Some(profile_runtime(&cfg, &weights, &frames, a.warmup, a.iters)?);
        if a.parallel {
            // The engine has no internal parallelism, so both modes time the
            // same single-threaded path.
            parallel = Some(profile_runtime(&cfg, &weights, &frames, a.warmup, a.iters)?);
        }
    }
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "hw_note": a.hw_note,
        "threads": crate::threads_from_env()?,
        "complexity": complexity,
        "runtime_single_thread": single,
        "runtime_parallel": parallel,
    });
    let text = to_json(&report);
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

/// Sequences in `dir`: one sub-directory each, holding `lr/` and `hr/`.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>, Failure> {
    let mut seqs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    seqs.sort();
    if seqs.is_empty() {
        return Err(Failure::Io(format!("no sequence directories in {}", dir.display())));
    }
    seqs.iter()
        .map(|s| {
            let (_, lr) = read_sequence(&s.join("lr"))?;
            let (_, hr) = read_sequence(&s.join("hr"))?;
            if lr.len() != hr.len() {
                return Err(Failure::Shape(format!(
                    "{}: {} LR frames vs {} HR frames",
                    s.display(),
                    lr.len(),
                    hr.len()
                )));
            }
            Ok(Sequence { lr, hr })
        })
        .collect()
}

fn train_toy(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = match &a.model_config {
        Some(p) => read_json(p)?,
        None => ModelConfig::toy(),
    };
    let tc = match &a.train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::toy(),
    };
    let data = load_dataset(&a.data)?;
    let init = match &a.init {
        Some(p) => Some(ModelWeights::load(p, &cfg)?),
        None => None,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_text(&a.out.join("train_config.json"), &to_json(&tc))?;
    let every = tc.eval_every;
    let outcome = train(&data, &cfg, &tc, init, Some(&a.out), |l| {
        if (l.step + 1) % every == 0 {
            eprintln!("step {} loss {:.6} lr {:e}", l.step + 1, l.loss, l.lr);
        }
    })?;
    for p in &outcome.checkpoints {
        write_text(&sidecar(p), &to_json(&cfg))?;
    }
    save_model(&a.out.join("final.dapw"), &outcome.weights, &cfg)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!("trained {} steps: loss {:.6} -> {:.6}", outcome.log.len(), first.loss, last.loss);
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        sequences: a.sequences,
        frames: a.frames,
        lr_size: (a.size, a.size),
        max_speed: a.max_speed,
        square: (a.square_min, a.square_max),
        ..SyntheticSpec::default()
    };
    if !(a.square_min > 0.0 && a.square_min < a.square_max) {
        return Err(Failure::Args("need 0 < square-min < square-max".into()));
    }
    let seqs = match a.translate {
        Some(v) => vec![global_translation(a.seed, a.frames, spec.lr_size, v, &spec.degrade)?],
        None => dataset(&spec, a.seed)?,
    };
    for (i, s) in seqs.iter().enumerate() {
        let dir = a.out.join(format!("seq_{i:03}"));
        for (t, (lr, hr)) in s.lr.iter().zip(&s.hr).enumerate() {
            write_frame(&dir.join("lr").join(format!("frame_{t:04}.png")), lr)?;
            write_frame(&dir.join("hr").join(format!("frame_{t:04}.png")), hr)?;
        }
    }
    println!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}

fn analyze_offsets(a: &AnalyzeArgs) -> Result<(), Failure> {
    let spec = HistogramSpec {
        magnitude_bins: a.magnitude_bins,
        magnitude_max: a.magnitude_max,
        grid_bins: a.grid_bins,
        grid_extent: a.grid_extent,
    };
    let dumps = read_offset_dumps(&a.dumps)?;
    let h = offset_histograms(&dumps, &spec)?;
    write_text(&a.out, &to_json(&h))?;
    let (mx, my) = h.mode2d();
    println!("{} frames, {} points, 2-D mode ({mx}, {my}) HR px", h.frames, h.points);
    Ok(())
}

fn propagate(a: &PropagateArgs) -> Result<(), Failure> {
    let (cfg, weights) = load_model(&a.model)?;
    let (_, lr) = read_sequence(&a.seq)?;
    let (_, gt) = read_sequence(&a.gt)?;
    let prepare: &dyn Fn(&Tensor) -> Tensor = if a.float_metrics { &|t| t.clone() } else { &quantize_frame };
    let study = propagation_study(&lr, &gt, &weights, &cfg, a.interval, prepare)?;
    write_text(&a.out, &study.to_csv())?;
    println!("{} rows written to {}", study.rows.len(), a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<(), Failure> {
    let ops: Vec<&str> = if a.op == "all" {
        OPS.to_vec()
    } else if OPS.contains(&a.op.as_str()) {
        vec![a.op.as_str()]
    } else {
        return Err(Failure::Args(format!("unknown op `{}`; known: {}", a.op, OPS.join(", "))));
    };
    let reports = ops
        .iter()
        .enumerate()
        .map(|(i, op)| gradcheck::<f64>(op, a.trials, a.tolerance, a.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let model = if a.model {
        Some(model_gradcheck(&ModelConfig::toy(), 2, 4, a.instances, 1e-2, a.seed)?)
    } else {
        None
    };
    let passed = reports.iter().all(|r| r.passed) && model.as_ref().is_none_or(|m| m.passed);
    let text = to_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "passed": passed,
        "ops": reports,
        "model": model,
    }));
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    println!("{text}");
    if passed {
        Ok(())
    } else {
        Err(Failure::Check("gradient check exceeded tolerance".into()))
    }
}
