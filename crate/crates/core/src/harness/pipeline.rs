use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{psnr, ssim};
use super::train::detect;
use crate::datagen::{EventStream, Image};
use crate::dataset::{frame_name, read_events, read_manifest, read_png, write_png};
use crate::detector::{build_quintuples, classify, Detector, Quintuple};
use crate::error::{config_err, CoreError, Result, StageExt};
use crate::eventfusion::voxelize;
use crate::hybformer::HybFormer;

/// A video to restore; `gt` enables metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoInput {
    pub frames: Vec<Image>,
    pub gt: Option<Vec<Image>>,
    pub events: Option<EventStream>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub prob: f32,
    pub label: u8,
    pub quintuple: Quintuple,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineRun {
    pub n: usize,
    pub records: Vec<FrameRecord>,
    pub restored: Vec<Image>,
}

impl PipelineRun {
    /// Mean PSNR and SSIM over frames with ground truth.
    pub fn means(&self) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.records.iter().filter_map(|r| Some((r.psnr?, r.ssim?))).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((rows.iter().map(|r| r.0).sum::<f64>() / n, rows.iter().map(|r| r.1).sum::<f64>() / n))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub used_fallback_minus: u8,
    pub used_fallback_plus: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuintupleRow {
    index: usize,
    prob: f32,
    label: u8,
    minus: usize,
    prev: usize,
    next: usize,
    plus: usize,
    used_fallback_minus: u8,
    used_fallback_plus: u8,
}

/// Detect labels over the whole video, build one quintuple per frame with search
/// range `n`, restore every frame.
pub fn restore_video(det: &Detector, model: &HybFormer, input: &VideoInput, n: usize, eps: f64) -> Result<PipelineRun> {
    if input.frames.is_empty() {
        return Err(CoreError::Data("video has no frames".into())).stage("detect");
    }
    if model.cfg.events && input.events.is_none() {
        return config_err("the restorer expects events but the video has none").stage("restore");
    }
    let probs = detect(det, &input.frames).stage("detect")?;
    let labels = classify(&probs, eps);
    let quints = build_quintuples(&input.frames, &labels, n).stage("quintuples")?;
    let shape = input.frames[0].shape();
    let (h, w) = (shape[1], shape[2]);
    let mut restored = Vec::with_capacity(quints.len());
    let mut records = Vec::with_capacity(quints.len());
    for (i, q) in quints.iter().enumerate() {
        let voxel = match (&input.events, model.cfg.events) {
            (Some(ev), true) => {
                let window = *ev.windows.get(i).ok_or_else(|| CoreError::Data(format!("no exposure window for frame {i}"))).stage("restore")?;
                Some(voxelize(ev, window, h, w).stage("restore")?)
            }
            _ => None,
        };
        let out = model.restore(q.frames(&input.frames), voxel.as_ref()).stage("restore")?;
        let out = out.map(|v| v.clamp(0.0, 1.0));
        let (p, s) = match &input.gt {
            Some(gt) => {
                let g = gt.get(i).ok_or_else(|| CoreError::Data(format!("no ground truth for frame {i}"))).stage("metrics")?;
                (Some(psnr(&out, g).stage("metrics")?), Some(ssim(&out, g).stage("metrics")?))
            }
            None => (None, None),
        };
        records.push(FrameRecord { index: i, prob: probs[i], label: labels[i], quintuple: *q, psnr: p, ssim: s });
        restored.push(out);
    }
    Ok(PipelineRun { n, records, restored })
}

/// Reads `frames/`, plus `gt/` and `events.csv` when present, from a dataset directory.
pub fn read_video(dir: &Path) -> Result<VideoInput> {
    let m = read_manifest(dir)?;
    let load = |sub: &str| -> Result<Vec<Image>> { (0..m.frames).map(|i| read_png(&dir.join(sub).join(frame_name(i)))).collect() };
    let frames = load("frames")?;
    let gt = if dir.join("gt").is_dir() { Some(load("gt")?) } else { None };
    let events = if m.has_events { Some(read_events(&dir.join("events.csv"), &m.windows)?) } else { None };
    Ok(VideoInput { frames, gt, events })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CoreError::io(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn metric_rows(run: &PipelineRun) -> Vec<MetricRow> {
    run.records
        .iter()
        .filter_map(|r| {
            Some(MetricRow {
                index: r.index,
                psnr: r.psnr?,
                ssim: r.ssim?,
                used_fallback_minus: u8::from(r.quintuple.used_fallback.0),
                used_fallback_plus: u8::from(r.quintuple.used_fallback.1),
            })
        })
        .collect()
}

/// `frames/`, `quintuples.csv` and (with ground truth) `metrics.csv` under `dir`.
pub fn write_run(dir: &Path, run: &PipelineRun) -> Result<()> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(|e| CoreError::io(&frames, e))?;
    for (i, img) in run.restored.iter().enumerate() {
        write_png(&frames.join(frame_name(i)), img)?;
    }
    write_rows(
        &dir.join("quintuples.csv"),
        run.records.iter().map(|r| {
            let [minus, prev, _, next, plus] = r.quintuple.indices;
            QuintupleRow {
                index: r.index,
                prob: r.prob,
                label: r.label,
                minus,
                prev,
                next,
                plus,
                used_fallback_minus: u8::from(r.quintuple.used_fallback.0),
                used_fallback_plus: u8::from(r.quintuple.used_fallback.1),
            }
        }),
    )?;
    if run.records.iter().all(|r| r.psnr.is_some()) {
        write_rows(&dir.join("metrics.csv"), metric_rows(run))?;
    }
    Ok(())
}

/// Output directory of one search range: `out` itself, or `out/n{n}` in a sweep.
pub fn run_dir(out: &Path, n: usize, sweep: bool) -> PathBuf {
    if sweep {
        out.join(format!("n{n}"))
    } else {
        out.to_path_buf()
    }
}

/// Restores the video once per search range in `ns`. A sweep (more than one `n`)
/// writes each run to `out/n{n}/` plus a `sweep.csv` summary.
pub fn run_pipeline(det: &Detector, model: &HybFormer, video: &VideoInput, out: &Path, ns: &[usize], eps: f64) -> Result<Vec<PipelineRun>> {
    if ns.is_empty() || ns.contains(&0) {
        return config_err("search ranges must be positive");
    }
    let sweep = ns.len() > 1;
    let mut runs = Vec::new();
    for &n in ns {
        let run = restore_video(det, model, video, n, eps)?;
        write_run(&run_dir(out, n, sweep), &run).stage("write")?;
        runs.push(run);
    }
    if sweep {
        let mut text = String::from("n,mean_psnr,mean_ssim,fallback_frames\n");
        for r in &runs {
            let (p, s) = r.means().unwrap_or((f64::NAN, f64::NAN));
            let fb = r.records.iter().filter(|x| x.quintuple.used_fallback != (false, false)).count();
            text += &format!("{},{p},{s},{fb}\n", r.n);
        }
        let path = out.join("sweep.csv");
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e)).stage("write")?;
    }
    Ok(runs)
}

/// Scores restored PNGs in `restored/frames` against `data/gt`, taking fallback
/// flags from `restored/quintuples.csv`.
pub fn evaluate(data: &Path, restored: &Path) -> Result<Vec<MetricRow>> {
    let m = read_manifest(data)?;
    let qpath = restored.join("quintuples.csv");
    let mut rdr = csv::Reader::from_path(&qpath).map_err(|e| CoreError::io(&qpath, e))?;
    let quints: Vec<QuintupleRow> = rdr.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| CoreError::io(&qpath, e))?;
    if quints.len() != m.frames {
        return Err(CoreError::Data(format!("{} restored frames for a {}-frame video", quints.len(), m.frames)));
    }
    let mut rows = Vec::with_capacity(m.frames);
    for (i, q) in quints.iter().enumerate() {
        let out = read_png(&restored.join("frames").join(frame_name(i)))?;
        let gt = read_png(&data.join("gt").join(frame_name(i)))?;
        rows.push(MetricRow {
            index: i,
            psnr: psnr(&out, &gt)?,
            ssim: ssim(&out, &gt)?,
            used_fallback_minus: q.used_fallback_minus,
            used_fallback_plus: q.used_fallback_plus,
        });
    }
    Ok(rows)
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_rows(path, rows)
}
