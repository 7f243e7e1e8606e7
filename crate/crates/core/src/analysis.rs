//! Offset statistics, sampling-location export and the hidden-state
//! propagation study.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cell::{run_frames, step, HiddenState, RunOptions};
use crate::config::ModelConfig;
use crate::dap::OffsetField;
use crate::error::{shape_err, Error, Result};
use crate::metrics::{psnr, SCHEMA_VERSION};
use crate::tensor::{rten, Tensor};
use crate::weights::ModelWeights;

/// One frame's level-0 offsets in LR pixels, with the factor that converts
/// them to HR pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetDump {
    pub frame: usize,
    pub scale: Option<usize>,
    pub field: OffsetField,
}

/// JSON sidecar written next to each `.rten` offset dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpMeta {
    pub schema_version: u32,
    #[serde(rename = "frame_index")]
    pub frame: usize,
    pub level: usize,
    pub k: usize,
    #[serde(rename = "scale_to_hr")]
    pub scale: usize,
    pub units: String,
}

fn dump_stem(frame: usize) -> String {
    format!("offsets_{frame:06}")
}

/// Writes `offsets_<frame>.rten` and its `.json` sidecar into `dir`.
pub fn write_offset_dump(dir: &Path, frame: usize, field: &OffsetField, scale: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = dump_stem(frame);
    let path = dir.join(format!("{stem}.rten"));
    rten::write(&path, &field.grid)?;
    let meta = DumpMeta {
        schema_version: SCHEMA_VERSION,
        frame,
        level: field.level,
        k: field.k(),
        scale,
        units: "lr_pixels".into(),
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?)?;
    Ok(path)
}

/// Reads every `.rten` dump in `dir` in name order. A dump without a readable
/// sidecar has no scale.
pub fn read_offset_dumps(dir: &Path) -> Result<Vec<OffsetDump>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rten"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Contract(format!("no .rten offset dumps in {}", dir.display())));
    }
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let grid = rten::read(p)?;
            let meta: Option<DumpMeta> = std::fs::read_to_string(p.with_extension("json"))
                .ok()
                .and_then(|s| serde_json::from_str(&s).ok());
            Ok(OffsetDump {
                frame: meta.as_ref().map_or(i, |m| m.frame),
                scale: meta.as_ref().map(|m| m.scale),
                field: OffsetField::new(meta.as_ref().map_or(0, |m| m.level), grid)?,
            })
        })
        .collect()
}

/// Bin layout for [`offset_histograms`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramSpec {
    pub magnitude_bins: usize,
    pub magnitude_max: f64,
    /// Bins per axis of the square displacement grid.
    pub grid_bins: usize,
    /// The grid spans `[-grid_extent, grid_extent]` on both axes.
    pub grid_extent: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            magnitude_bins: 64,
            magnitude_max: 40.0,
            grid_bins: 81,
            grid_extent: 40.0,
        }
    }
}

/// Index of `v` in `bins` equal bins over `[lo, hi]`; out-of-range values
/// land in the edge bins.
fn bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let i = ((v - lo) / (hi - lo) * bins as f64).floor();
    if i.is_nan() || i < 0.0 {
        0
    } else {
        (i as usize).min(bins - 1)
    }
}

/// Offset histograms in HR pixels. `joint` holds `(gx, gy, magnitude_bin,
/// count)` so both marginals can be recovered from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetHistograms {
    pub schema_version: u32,
    pub spec: HistogramSpec,
    pub scale: usize,
    pub frames: usize,
    pub points: u64,
    pub hist1d: Vec<u64>,
    /// Row-major `[gy][gx]`; `gx` indexes `dx`, `gy` indexes `dy`.
    pub hist2d: Vec<Vec<u64>>,
    pub joint: Vec<(usize, usize, usize, u64)>,
}

impl OffsetHistograms {
    /// Centre of bin `i` of the displacement grid.
    pub fn grid_center(&self, i: usize) -> f64 {
        let w = 2.0 * self.spec.grid_extent / self.spec.grid_bins as f64;
        -self.spec.grid_extent + (i as f64 + 0.5) * w
    }

    /// `(dx, dy)` centre of the most populated 2-D bin (first on ties).
    pub fn mode2d(&self) -> (f64, f64) {
        let mut best = (0, 0, 0u64);
        for (gy, row) in self.hist2d.iter().enumerate() {
            for (gx, &c) in row.iter().enumerate() {
                if c > best.2 {
                    best = (gx, gy, c);
                }
            }
        }
        (self.grid_center(best.0), self.grid_center(best.1))
    }

    pub fn total1d(&self) -> u64 {
        self.hist1d.iter().sum()
    }

    pub fn total2d(&self) -> u64 {
        self.hist2d.iter().flatten().sum()
    }

    /// Magnitude histogram recovered from the joint table.
    pub fn hist1d_from_joint(&self) -> Vec<u64> {
        let mut h = vec![0; self.spec.magnitude_bins];
        for &(_, _, m, c) in &self.joint {
            h[m] += c;
        }
        h
    }

    /// Displacement grid recovered from the joint table.
    pub fn hist2d_from_joint(&self) -> Vec<Vec<u64>> {
        let n = self.spec.grid_bins;
        let mut h = vec![vec![0; n]; n];
        for &(gx, gy, _, c) in &self.joint {
            h[gy][gx] += c;
        }
        h
    }
}

/// Counts every point of every pixel of every dump.
pub fn offset_histograms(dumps: &[OffsetDump], spec: &HistogramSpec) -> Result<OffsetHistograms> {
    if spec.magnitude_bins == 0 || spec.grid_bins == 0 || !(spec.magnitude_max > 0.0) || !(spec.grid_extent > 0.0) {
        return Err(Error::Config("histogram bins and ranges must be positive".into()));
    }
    let first = dumps.first().ok_or_else(|| Error::Contract("no offset dumps".into()))?;
    let scale = first
        .scale
        .ok_or_else(|| Error::Contract(format!("offset dump {} has no scale metadata", first.frame)))?;
    let n = spec.grid_bins;
    let mut hist1d = vec![0u64; spec.magnitude_bins];
    let mut hist2d = vec![vec![0u64; n]; n];
    let mut joint: BTreeMap<(usize, usize, usize), u64> = BTreeMap::new();
    let mut points = 0u64;
    let r = scale as f64;
    for d in dumps {
        match d.scale {
            Some(s) if s == scale => {}
            Some(s) => return Err(Error::Contract(format!("dump {} has scale {s}, expected {scale}", d.frame))),
            None => return Err(Error::Contract(format!("offset dump {} has no scale metadata", d.frame))),
        }
        let (_, h, w) = d.field.grid.chw()?;
        for i in 0..d.field.k() {
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = d.field.at(i, y, x);
                    let (dx, dy) = (dx as f64 * r, dy as f64 * r);
                    let m = bin((dx * dx + dy * dy).sqrt(), 0.0, spec.magnitude_max, spec.magnitude_bins);
                    let gx = bin(dx, -spec.grid_extent, spec.grid_extent, n);
                    let gy = bin(dy, -spec.grid_extent, spec.grid_extent, n);
                    hist1d[m] += 1;
                    hist2d[gy][gx] += 1;
                    *joint.entry((gx, gy, m)).or_default() += 1;
                    points += 1;
                }
            }
        }
    }
    Ok(OffsetHistograms {
        schema_version: SCHEMA_VERSION,
        spec: *spec,
        scale,
        frames: dumps.len(),
        points,
        hist1d,
        hist2d,
        joint: joint.into_iter().map(|((a, b, c), n)| (a, b, c, n)).collect(),
    })
}

/// Where one query pixel's `k` keys and values come from in the previous
/// frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPoints {
    /// `(y, x)` query pixel on the LR grid.
    pub query: (usize, usize),
    pub query_hr: (f64, f64),
    /// Clamped `(y, x)` sample locations on the LR grid.
    pub points_lr: Vec<(f32, f32)>,
    /// The same locations in HR pixels.
    pub points_hr: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePointExport {
    pub schema_version: u32,
    pub scale: usize,
    pub k: usize,
    pub queries: Vec<QueryPoints>,
}

/// Sample locations of the listed pixels from a level-0 offset field.
pub fn sample_points(field: &OffsetField, pixels: &[(usize, usize)], scale: usize) -> Result<SamplePointExport> {
    let (_, h, w) = field.grid.chw()?;
    let mut queries = Vec::with_capacity(pixels.len());
    for &(y, x) in pixels {
        if y >= h || x >= w {
            return shape_err(format!("pixel ({y}, {x}) outside {h}x{w}"));
        }
        let mut lr = Vec::with_capacity(field.k());
        for i in 0..field.k() {
            let (dx, dy) = field.at(i, y, x);
            let u = (y as f32 + dy).max(0.0).min((h - 1) as f32);
            let v = (x as f32 + dx).max(0.0).min((w - 1) as f32);
            lr.push((u, v));
        }
        let s = scale as f64;
        queries.push(QueryPoints {
            query: (y, x),
            query_hr: (y as f64 * s, x as f64 * s),
            points_hr: lr.iter().map(|&(u, v)| (u as f64 * s, v as f64 * s)).collect(),
            points_lr: lr,
        });
    }
    Ok(SamplePointExport {
        schema_version: SCHEMA_VERSION,
        scale,
        k: field.k(),
        queries,
    })
}

/// Runs one step on `(x_prev, x_t)` from an empty hidden state and exports
/// the sample locations of `pixels`.
pub fn export_sample_points(
    x_prev: &Tensor,
    x_t: &Tensor,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    pixels: &[(usize, usize)],
) -> Result<SamplePointExport> {
    let (_, h, w) = x_t.chw()?;
    let out = step(x_t, x_prev, &HiddenState::zeros(cfg.n, h, w), weights, cfg)?;
    let field = out
        .offsets
        .ok_or_else(|| Error::Config(format!("configuration `{}` predicts no offsets", cfg.name)))?;
    sample_points(&field, pixels, cfg.scale)
}

/// One PSNR value of a propagation curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub start: usize,
    pub frame: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationStudy {
    pub interval: usize,
    pub rows: Vec<CurvePoint>,
}

impl PropagationStudy {
    /// `start,frame,psnr` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("start,frame,psnr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.start, r.frame, crate::metrics::format_db(r.psnr));
        }
        s
    }

    pub fn curve(&self, start: usize) -> Vec<CurvePoint> {
        self.rows.iter().filter(|r| r.start == start).copied().collect()
    }

    /// Mean PSNR of the first `n` frames of each later curve (cold) and of
    /// the same frames on the curve started at 0 (warm).
    pub fn cold_vs_warm(&self, n: usize) -> (f64, f64) {
        let warm: BTreeMap<usize, f64> = self.curve(0).iter().map(|r| (r.frame, r.psnr)).collect();
        let (mut cold_sum, mut warm_sum, mut count) = (0.0, 0.0, 0.0);
        for r in self.rows.iter().filter(|r| r.start > 0 && r.frame < r.start + n) {
            cold_sum += r.psnr;
            warm_sum += warm[&r.frame];
            count += 1.0;
        }
        (cold_sum / count, warm_sum / count)
    }
}

/// For each start `s` in `0, N, 2N, ...`, runs from an empty hidden state at
/// `s` to the end and records PSNR against `gt`. `prepare` maps each output
/// frame to the image that is scored.
pub fn propagation_study(
    lr: &[Tensor],
    gt: &[Tensor],
    weights: &ModelWeights,
    cfg: &ModelConfig,
    interval: usize,
    prepare: &dyn Fn(&Tensor) -> Tensor,
) -> Result<PropagationStudy> {
    if interval == 0 {
        return Err(Error::Config("interval must be positive".into()));
    }
    if gt.len() != lr.len() || gt.is_empty() {
        return Err(Error::Contract(format!(
            "{} input frames but {} ground-truth frames",
            lr.len(),
            gt.len()
        )));
    }
    let mut rows = Vec::new();
    for start in (0..lr.len()).step_by(interval) {
        let outs = run_frames(&lr[start..], weights, cfg, RunOptions::default())?;
        for (i, o) in outs.iter().enumerate() {
            let t = start + i;
            rows.push(CurvePoint {
                start,
                frame: t,
                psnr: psnr(&prepare(&o.y), &gt[t])?,
            });
        }
    }
    Ok(PropagationStudy { interval, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bilinear_sample;

    fn field_const(k: usize, h: usize, w: usize, dx: f32, dy: f32) -> OffsetField {
        let grid = Tensor::from_fn(&[2 * k, h, w], |i| if (i / (h * w)) % 2 == 0 { dx } else { dy });
        OffsetField::new(0, grid).unwrap()
    }

    fn dump(frame: usize, f: OffsetField) -> OffsetDump {
        OffsetDump {
            frame,
            scale: Some(4),
            field: f,
        }
    }

    #[test]
    fn zero_offsets_spike_at_zero() {
        let d: Vec<_> = (0..3).map(|i| dump(i, field_const(4, 5, 6, 0.0, 0.0))).collect();
        let h = offset_histograms(&d, &HistogramSpec::default()).unwrap();
        assert_eq!(h.points, 3 * 30 * 4);
        assert_eq!(h.hist1d[0], h.points);
        assert_eq!(h.mode2d(), (0.0, 0.0));
    }

    #[test]
    fn unit_lr_offset_is_four_hr_pixels() {
        let d = vec![dump(0, field_const(4, 4, 4, 1.0, 0.0))];
        let h = offset_histograms(&d, &HistogramSpec::default()).unwrap();
        let m = bin(4.0, 0.0, 40.0, 64);
        assert_eq!(h.hist1d[m], 64);
        let (mx, my) = h.mode2d();
        assert!((mx - 4.0).abs() <= 0.5 && my.abs() <= 0.5, "{mx} {my}");
    }

    #[test]
    fn joint_table_reproduces_marginals() {
        let grid = Tensor::from_fn(&[8, 6, 6], |i| ((i * 37 % 101) as f32 - 50.0) / 3.0);
        let d = vec![dump(0, OffsetField::new(0, grid).unwrap())];
        let h = offset_histograms(&d, &HistogramSpec::default()).unwrap();
        assert_eq!(h.hist1d_from_joint(), h.hist1d);
        assert_eq!(h.hist2d_from_joint(), h.hist2d);
        assert_eq!((h.total1d(), h.total2d()), (h.points, h.points));
    }

    #[test]
    fn missing_scale_is_an_error() {
        let mut d = dump(0, field_const(4, 2, 2, 0.0, 0.0));
        d.scale = None;
        assert!(matches!(offset_histograms(&[d], &HistogramSpec::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn dumps_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = field_const(4, 3, 5, 0.25, -1.5);
        write_offset_dump(dir.path(), 0, &f, 4).unwrap();
        write_offset_dump(dir.path(), 1, &f, 4).unwrap();
        let back = read_offset_dumps(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], dump(1, f));
        std::fs::remove_file(dir.path().join("offsets_000000.json")).unwrap();
        let back = read_offset_dumps(dir.path()).unwrap();
        assert!(offset_histograms(&back, &HistogramSpec::default()).is_err());
    }

    #[test]
    fn sample_points_zero_and_clamped() {
        let e = sample_points(&field_const(4, 6, 6, 0.0, 0.0), &[(2, 3)], 4).unwrap();
        assert_eq!(e.queries[0].points_hr, vec![(8.0, 12.0); 4]);
        let far = sample_points(&field_const(4, 6, 6, 100.0, -100.0), &[(2, 3)], 4).unwrap();
        assert_eq!(far.queries[0].points_lr, vec![(0.0, 5.0); 4]);
        assert!(sample_points(&field_const(4, 6, 6, 0.0, 0.0), &[(6, 0)], 4).is_err());
    }

    #[test]
    fn exported_points_resample_model_values() {
        let grid = Tensor::from_fn(&[8, 6, 7], |i| ((i * 29 % 83) as f32 - 41.0) / 9.0);
        let field = OffsetField::new(0, grid).unwrap();
        let feats = Tensor::from_fn(&[3, 6, 7], |i| ((i * 13 % 47) as f32) / 47.0);
        let used = crate::dap::sample_kv(&feats, &field).unwrap();
        let pixels: Vec<_> = (0..6).flat_map(|y| (0..7).map(move |x| (y, x))).collect();
        let e = sample_points(&field, &pixels, 4).unwrap();
        for q in &e.queries {
            let vals = bilinear_sample(&feats, &q.points_lr).unwrap();
            let (y, x) = q.query;
            for (i, v) in vals.iter().enumerate() {
                for c in 0..3 {
                    assert_eq!(v[c], used.data()[((i * 3 + c) * 6 + y) * 7 + x]);
                }
            }
        }
    }

    #[test]
    fn propagation_rows_cover_each_suffix() {
        let cfg = ModelConfig::toy();
        let w = ModelWeights::init(&cfg, 1).unwrap();
        let lr: Vec<_> = (0..5).map(|i| Tensor::full(&[3, 4, 4], 0.1 * i as f32)).collect();
        let gt: Vec<_> = (0..5).map(|i| Tensor::full(&[3, 16, 16], 0.1 * i as f32)).collect();
        let s = propagation_study(&lr, &gt, &w, &cfg, 2, &|t| t.clone()).unwrap();
        assert_eq!(s.rows.len(), 5 + 3 + 1);
        for start in [0, 2, 4] {
            let frames: Vec<_> = s.curve(start).iter().map(|r| r.frame).collect();
            assert_eq!(frames, (start..5).collect::<Vec<_>>());
        }
        assert!(s.to_csv().starts_with("start,frame,psnr\n0,0,"));
        assert!(propagation_study(&lr, &gt[..4], &w, &cfg, 2, &|t| t.clone()).is_err());
    }
}
