//! Dataset directory layout:
//!
//! ```text
//! meta.json            manifest (profile, seed, dims, fps, exposure windows)
//! labels.csv           index,label,n_avg
//! frames/frame_%06d.png
//! gt/frame_%06d.png
//! events.csv           t_us,x,y,p   (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nsf_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::datagen::{BlurProfile, Event, EventStream, Image, LabeledSequence};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub profile: BlurProfile,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fps_virtual: f64,
    pub windows: Vec<(i64, i64)>,
    pub has_events: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    label: u8,
    n_avg: usize,
}

/// Round-half-up 8-bit quantization.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = image::Rgb([0, 1, 2].map(|c| quantize(img.at(&[c, y, x]))));
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| CoreError::io(path, e))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| CoreError::io(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CoreError::io(path, e))
}

pub fn write_dataset(dir: &Path, seq: &LabeledSequence, events: Option<&EventStream>) -> Result<()> {
    if seq.is_empty() {
        return Err(CoreError::Data("cannot write an empty sequence".into()));
    }
    let (h, w) = seq.dims();
    for sub in ["frames", "gt"] {
        mkdir(&dir.join(sub))?;
    }
    for (i, (f, g)) in seq.frames.iter().zip(&seq.gt_frames).enumerate() {
        write_png(&dir.join("frames").join(frame_name(i)), f)?;
        write_png(&dir.join("gt").join(frame_name(i)), g)?;
    }
    let labels_path = dir.join("labels.csv");
    let mut wtr = csv::Writer::from_path(&labels_path).map_err(|e| CoreError::io(&labels_path, e))?;
    for (i, (&label, &n_avg)) in seq.labels.iter().zip(&seq.n_avg).enumerate() {
        wtr.serialize(LabelRow { index: i, label, n_avg }).map_err(|e| CoreError::io(&labels_path, e))?;
    }
    wtr.flush().map_err(|e| CoreError::io(&labels_path, e))?;
    if let Some(ev) = events {
        write_events(&dir.join("events.csv"), ev)?;
    }
    let manifest = Manifest {
        profile: seq.profile.clone(),
        seed: seq.seed,
        height: h,
        width: w,
        frames: seq.len(),
        fps_virtual: seq.fps_virtual,
        windows: seq.windows.clone(),
        has_events: events.is_some(),
    };
    let meta = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::io(&meta, e))?;
    fs::write(&meta, text + "\n").map_err(|e| CoreError::io(&meta, e))
}

pub fn write_events(path: &Path, ev: &EventStream) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| CoreError::io(path, e))?;
    for e in &ev.records {
        wtr.serialize(e).map_err(|err| CoreError::io(path, err))?;
    }
    wtr.flush().map_err(|e| CoreError::io(path, e))
}

/// Reads `t_us,x,y,p` records; `windows` are attached as given.
pub fn read_events(path: &Path, windows: &[(i64, i64)]) -> Result<EventStream> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CoreError::io(path, e))?;
    let mut records = Vec::new();
    for (row, rec) in rdr.deserialize::<Event>().enumerate() {
        let e = rec.map_err(|e| CoreError::io(path, format!("record {row}: {e}")))?;
        if e.p != 1 && e.p != -1 {
            return Err(CoreError::Data(format!("{}: record {row} has polarity {}", path.display(), e.p)));
        }
        records.push(e);
    }
    if records.windows(2).any(|p| p[0].t_us > p[1].t_us) {
        return Err(CoreError::Data(format!("{}: timestamps not sorted", path.display())));
    }
    Ok(EventStream { records, windows: windows.to_vec() })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let meta = dir.join("meta.json");
    let text = fs::read_to_string(&meta).map_err(|e| CoreError::io(&meta, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::io(&meta, e))
}

fn frame_paths(dir: &Path, sub: &str, n: usize) -> Vec<PathBuf> {
    (0..n).map(|i| dir.join(sub).join(frame_name(i))).collect()
}

pub fn read_dataset(dir: &Path) -> Result<(LabeledSequence, Option<EventStream>)> {
    let m = read_manifest(dir)?;
    let labels_path = dir.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&labels_path).map_err(|e| CoreError::io(&labels_path, e))?;
    let mut labels = Vec::new();
    let mut n_avg = Vec::new();
    for (i, rec) in rdr.deserialize::<LabelRow>().enumerate() {
        let row = rec.map_err(|e| CoreError::io(&labels_path, e))?;
        if row.index != i || row.label > 1 {
            return Err(CoreError::Data(format!("{}: bad row {i}", labels_path.display())));
        }
        labels.push(row.label);
        n_avg.push(row.n_avg);
    }
    if labels.len() != m.frames || m.windows.len() != m.frames {
        return Err(CoreError::Data(format!("{}: frame count disagrees with meta.json", dir.display())));
    }
    let load = |sub: &str| -> Result<Vec<Image>> {
        frame_paths(dir, sub, m.frames)
            .iter()
            .map(|p| {
                let img = read_png(p)?;
                if img.shape()[1..] != [m.height, m.width] {
                    return Err(CoreError::Data(format!("{}: unexpected size", p.display())));
                }
                Ok(img)
            })
            .collect()
    };
    let seq = LabeledSequence {
        frames: load("frames")?,
        gt_frames: load("gt")?,
        labels,
        n_avg,
        windows: m.windows.clone(),
        profile: m.profile.clone(),
        seed: m.seed,
        fps_virtual: m.fps_virtual,
    };
    let events = if m.has_events { Some(read_events(&dir.join("events.csv"), &m.windows)?) } else { None };
    Ok((seq, events))
}

/// Directory name of the `i`-th sequence in a multi-sequence dataset.
pub fn sequence_name(i: usize) -> String {
    format!("seq_{i:03}")
}

/// Sequence directories under `dir`: `dir` itself when it holds `meta.json`,
/// otherwise its subdirectories that do, in name order.
pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("meta.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(|e| CoreError::io(dir, e))?.path();
        if path.join("meta.json").is_file() {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CoreError::Data(format!("{}: no sequences found", dir.display())));
    }
    Ok(out)
}

pub fn read_collection(dir: &Path) -> Result<Vec<(LabeledSequence, Option<EventStream>)>> {
    sequence_dirs(dir)?.iter().map(|d| read_dataset(d)).collect()
}
