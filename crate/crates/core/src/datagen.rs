//! Procedural sharp video, exposure-averaging blur, labeled sequences and events.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`.

use std::f64::consts::TAU;

use nsf_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, CoreError, Result};
use crate::layers::Rng64;

pub type Image = Tensor<f32>;

pub const DEFAULT_FPS: f64 = 960.0;
pub const DEFAULT_CONTRAST: f64 = 0.15;
const LOG_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SharpVideo {
    pub frames: Vec<Image>,
    pub fps_virtual: f64,
    pub seed: u64,
}

impl SharpVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Timestamp of high-rate frame `k` in microseconds.
    pub fn time_us(&self, k: usize) -> f64 {
        k as f64 * 1e6 / self.fps_virtual
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpriteShape {
    Disk,
    Square,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub shape: SpriteShape,
    /// Center at frame 0, pixels (x = column, y = row).
    pub center: (f64, f64),
    /// Pixels per high-rate frame.
    pub velocity: (f64, f64),
    /// Radius (disk) or half side (square).
    pub size: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wave {
    /// Cycles per pixel along x and y.
    pub freq: (f64, f64),
    pub phase: f64,
    pub amp: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub h: usize,
    pub w: usize,
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
    /// Background translation in pixels per high-rate frame.
    pub pan: (f64, f64),
    pub sprites: Vec<Sprite>,
}

/// Speed ranges used when drawing a random scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub sprite_speed: (f64, f64),
    pub pan_speed: (f64, f64),
}

impl Default for Motion {
    fn default() -> Self {
        Motion { sprite_speed: (0.8, 1.6), pan_speed: (0.3, 0.6) }
    }
}

const FINE_WAVES: usize = 3;
/// Cycles per pixel of the fine texture waves.
const FINE_FREQ: (f64, f64) = (0.15, 0.3);

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return config_err(format!("frame size {h}x{w} must be positive multiples of 4"));
    }
    Ok(())
}

fn random_direction(rng: &mut impl Rng, speed: (f64, f64)) -> (f64, f64) {
    let s = if speed.1 > speed.0 { rng.random_range(speed.0..speed.1) } else { speed.0 };
    let a = rng.random_range(0.0..TAU);
    (s * a.cos(), s * a.sin())
}

impl Scene {
    /// Textured panning background plus 2 to 4 moving sprites.
    pub fn random(h: usize, w: usize, motion: Motion, rng: &mut impl Rng) -> Result<Scene> {
        check_dims(h, w)?;
        let base = [0.0; 3].map(|_| rng.random_range(0.3..0.7));
        // broad shading plus fine texture; averaging mostly erases the latter
        let mut waves: Vec<Wave> = (0..3)
            .map(|_| Wave {
                freq: (rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12)),
                phase: rng.random_range(0.0..TAU),
                amp: [0.0; 3].map(|_| rng.random_range(0.03..0.09)),
            })
            .collect();
        for _ in 0..FINE_WAVES {
            let (fx, fy) = random_direction(rng, FINE_FREQ);
            waves.push(Wave { freq: (fx, fy), phase: rng.random_range(0.0..TAU), amp: [0.0; 3].map(|_| rng.random_range(0.04..0.1)) });
        }
        let n = rng.random_range(2..=4);
        let side = h.min(w) as f64;
        let sprites = (0..n)
            .map(|_| Sprite {
                shape: if rng.random_bool(0.5) { SpriteShape::Disk } else { SpriteShape::Square },
                center: (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)),
                velocity: random_direction(rng, motion.sprite_speed),
                size: rng.random_range(0.08..0.18) * side,
                color: [0.0; 3].map(|_| rng.random_range(0.0..1.0)),
            })
            .collect();
        Ok(Scene { h, w, base, waves, pan: random_direction(rng, motion.pan_speed), sprites })
    }

    /// Single-colored background with no texture and no motion.
    pub fn flat(h: usize, w: usize, color: [f64; 3]) -> Result<Scene> {
        check_dims(h, w)?;
        Ok(Scene { h, w, base: color, waves: Vec::new(), pan: (0.0, 0.0), sprites: Vec::new() })
    }

    pub fn render(&self, t: f64) -> Image {
        let (h, w) = (self.h, self.w);
        let mut data = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (bx, by) = (x as f64 - self.pan.0 * t, y as f64 - self.pan.1 * t);
                let mut px = self.base;
                for wave in &self.waves {
                    let s = (TAU * (wave.freq.0 * bx + wave.freq.1 * by) + wave.phase).sin();
                    for c in 0..3 {
                        px[c] += wave.amp[c] * s;
                    }
                }
                for sp in &self.sprites {
                    let a = sp.coverage(x as f64, y as f64, t, w as f64, h as f64);
                    if a > 0.0 {
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - a) + sp.color[c] * a;
                        }
                    }
                }
                for c in 0..3 {
                    data[(c * h + y) * w + x] = px[c].clamp(0.0, 1.0) as f32;
                }
            }
        }
        Tensor::new(&[3, h, w], data).expect("positive dims")
    }

    pub fn render_video(&self, n_frames: usize, fps_virtual: f64, seed: u64) -> SharpVideo {
        let frames = (0..n_frames).map(|k| self.render(k as f64)).collect();
        SharpVideo { frames, fps_virtual, seed }
    }
}

fn wrap(d: f64, period: f64) -> f64 {
    d - period * (d / period).round()
}

impl Sprite {
    /// Anti-aliased coverage of pixel center `(x, y)` at frame time `t`; wraps around the frame.
    fn coverage(&self, x: f64, y: f64, t: f64, w: f64, h: f64) -> f64 {
        let dx = wrap(x - (self.center.0 + self.velocity.0 * t), w);
        let dy = wrap(y - (self.center.1 + self.velocity.1 * t), h);
        let edge = |d: f64| (self.size - d + 0.5).clamp(0.0, 1.0);
        match self.shape {
            SpriteShape::Disk => edge((dx * dx + dy * dy).sqrt()),
            SpriteShape::Square => edge(dx.abs()) * edge(dy.abs()),
        }
    }
}

/// Deterministic random scene of `n_frames` high-rate frames.
pub fn synth_video(h: usize, w: usize, n_frames: usize, seed: u64) -> Result<SharpVideo> {
    synth_video_with(h, w, n_frames, seed, Motion::default())
}

pub fn synth_video_with(h: usize, w: usize, n_frames: usize, seed: u64, motion: Motion) -> Result<SharpVideo> {
    if n_frames < 2 {
        return config_err(format!("need at least 2 frames, got {n_frames}"));
    }
    let mut rng = Rng64::seed_from_u64(seed);
    Ok(Scene::random(h, w, motion, &mut rng)?.render_video(n_frames, DEFAULT_FPS, seed))
}

/// Inclusive high-rate frame range averaged for an output frame centered at `center`.
pub fn blur_window(len: usize, center: usize, n_avg: usize) -> (usize, usize) {
    let lo = center.saturating_sub(n_avg / 2);
    let hi = (center + n_avg.div_ceil(2)).saturating_sub(1).min(len - 1);
    (lo, hi.max(lo))
}

/// Mean of the frames in the (clipped) window around `center`.
pub fn blur_average(video: &SharpVideo, center: usize, n_avg: usize) -> Result<Image> {
    if center >= video.len() {
        return Err(CoreError::Index(format!("center {center} outside video of {} frames", video.len())));
    }
    if n_avg == 0 {
        return config_err("n_avg must be at least 1");
    }
    let (lo, hi) = blur_window(video.len(), center, n_avg);
    let mut acc = vec![0f64; video.frames[center].numel()];
    for f in &video.frames[lo..=hi] {
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v as f64;
        }
    }
    let n = (hi - lo + 1) as f64;
    Ok(Tensor::new(video.frames[center].shape(), acc.iter().map(|&a| (a / n) as f32).collect())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurProfile {
    pub name: String,
    pub avg_min: usize,
    pub avg_max: usize,
    /// Sharp iff `n_avg < sharp_threshold`.
    pub sharp_threshold: usize,
}

impl BlurProfile {
    pub fn gopro_like() -> Self {
        BlurProfile { name: "gopro_like".into(), avg_min: 1, avg_max: 15, sharp_threshold: 5 }
    }

    pub fn reds_like() -> Self {
        BlurProfile { name: "reds_like".into(), avg_min: 3, avg_max: 39, sharp_threshold: 17 }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gopro_like" => Ok(Self::gopro_like()),
            "reds_like" => Ok(Self::reds_like()),
            other => config_err(format!("unknown blur profile `{other}`")),
        }
    }

    pub fn label(&self, n_avg: usize) -> u8 {
        u8::from(n_avg < self.sharp_threshold)
    }
}

/// Which sharp frame of an averaging window serves as ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtAnchor {
    #[default]
    Center,
    First,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub frames: Vec<Image>,
    pub gt_frames: Vec<Image>,
    /// 1 = sharp, 0 = blurry.
    pub labels: Vec<u8>,
    pub n_avg: Vec<usize>,
    /// Exposure interval of each output frame, microseconds.
    pub windows: Vec<(i64, i64)>,
    pub profile: BlurProfile,
    pub seed: u64,
    pub fps_virtual: f64,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }
}

/// High-rate frames between consecutive output frames.
pub fn temporal_stride(video_len: usize, out_len: usize) -> Result<usize> {
    if out_len == 0 || video_len / out_len == 0 {
        return config_err(format!("video of {video_len} frames cannot yield {out_len} output frames"));
    }
    Ok(video_len / out_len)
}

/// Builds the sequence for explicit per-frame averaging counts.
pub fn sequence_from_counts(
    video: &SharpVideo,
    profile: &BlurProfile,
    n_avg: &[usize],
    seed: u64,
    anchor: GtAnchor,
) -> Result<LabeledSequence> {
    let stride = temporal_stride(video.len(), n_avg.len())?;
    let dt = 1e6 / video.fps_virtual;
    let mut seq = LabeledSequence {
        frames: Vec::new(),
        gt_frames: Vec::new(),
        labels: Vec::new(),
        n_avg: n_avg.to_vec(),
        windows: Vec::new(),
        profile: profile.clone(),
        seed,
        fps_virtual: video.fps_virtual,
    };
    for (i, &n) in n_avg.iter().enumerate() {
        let center = i * stride + stride / 2;
        let (lo, hi) = blur_window(video.len(), center, n);
        seq.frames.push(blur_average(video, center, n)?);
        let gt = match anchor {
            GtAnchor::Center => center,
            GtAnchor::First => lo,
        };
        seq.gt_frames.push(video.frames[gt].clone());
        seq.labels.push(profile.label(n));
        let t0 = (video.time_us(lo) - dt / 2.0).round() as i64;
        let t1 = (video.time_us(hi) + dt / 2.0).round() as i64;
        seq.windows.push((t0, t1));
    }
    Ok(seq)
}

/// Draws half the frames sharp (shuffled positions), then each frame's averaging count
/// uniformly among the counts consistent with its label.
pub fn draw_counts(profile: &BlurProfile, out_len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n_sharp = out_len.div_ceil(2);
    let mut sharp: Vec<bool> = (0..out_len).map(|i| i < n_sharp).collect();
    sharp.shuffle(rng);
    sharp
        .into_iter()
        .map(|want| loop {
            let n = rng.random_range(profile.avg_min..=profile.avg_max);
            if (profile.label(n) == 1) == want {
                break n;
            }
        })
        .collect()
}

pub fn make_labeled_sequence(
    video: &SharpVideo,
    profile: &BlurProfile,
    out_len: usize,
    seed: u64,
) -> Result<LabeledSequence> {
    make_labeled_sequence_with(video, profile, out_len, seed, GtAnchor::Center)
}

pub fn make_labeled_sequence_with(
    video: &SharpVideo,
    profile: &BlurProfile,
    out_len: usize,
    seed: u64,
    anchor: GtAnchor,
) -> Result<LabeledSequence> {
    temporal_stride(video.len(), out_len)?;
    let mut rng = Rng64::seed_from_u64(seed);
    let counts = draw_counts(profile, out_len, &mut rng);
    sequence_from_counts(video, profile, &counts, seed, anchor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t_us: i64,
    pub x: u32,
    pub y: u32,
    pub p: i8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStream {
    pub records: Vec<Event>,
    pub windows: Vec<(i64, i64)>,
}

fn log_luma(img: &Image, i: usize, plane: usize) -> f64 {
    let d = img.data();
    let l = 0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64;
    (l + LOG_EPS).ln()
}

/// Emits an event whenever a pixel's log luminance moves `threshold` away from its level at
/// the previous event; times are interpolated linearly between frames and rounded to µs.
pub fn synth_events(video: &SharpVideo, threshold: f64, windows: &[(i64, i64)]) -> Result<EventStream> {
    if threshold <= 0.0 {
        return config_err("contrast threshold must be positive");
    }
    let (h, w) = video.dims();
    let plane = h * w;
    let mut reference: Vec<f64> = (0..plane).map(|i| log_luma(&video.frames[0], i, plane)).collect();
    let mut records = Vec::new();
    for k in 1..video.len() {
        let (ta, tb) = (video.time_us(k - 1), video.time_us(k));
        for (i, r) in reference.iter_mut().enumerate() {
            let la = log_luma(&video.frames[k - 1], i, plane);
            let lb = log_luma(&video.frames[k], i, plane);
            let mut emit = |level: f64, p: i8| {
                let t = ta + (level - la) / (lb - la) * (tb - ta);
                records.push(Event { t_us: t.round() as i64, x: (i % w) as u32, y: (i / w) as u32, p });
            };
            while lb - *r >= threshold {
                *r += threshold;
                emit(*r, 1);
            }
            while *r - lb >= threshold {
                *r -= threshold;
                emit(*r, -1);
            }
        }
    }
    records.sort_by_key(|e| (e.t_us, e.y, e.x));
    Ok(EventStream { records, windows: windows.to_vec() })
}

/// Complete synthetic sample: labeled sequence plus optional events.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub h: usize,
    pub w: usize,
    pub out_len: usize,
    pub profile: BlurProfile,
    pub seed: u64,
    pub motion: Motion,
    pub anchor: GtAnchor,
    pub events: bool,
    pub contrast: f64,
}

impl SynthConfig {
    pub fn new(h: usize, w: usize, out_len: usize, profile: BlurProfile, seed: u64) -> Self {
        SynthConfig {
            h,
            w,
            out_len,
            profile,
            seed,
            motion: Motion::default(),
            anchor: GtAnchor::Center,
            events: false,
            contrast: DEFAULT_CONTRAST,
        }
    }

    fn video(&self) -> Result<SharpVideo> {
        let frames = self.out_len * self.profile.avg_max.max(2);
        synth_video_with(self.h, self.w, frames, self.seed, self.motion)
    }

    pub fn generate(&self) -> Result<(LabeledSequence, Option<EventStream>)> {
        let video = self.video()?;
        let seq = make_labeled_sequence_with(&video, &self.profile, self.out_len, self.seed, self.anchor)?;
        let events = if self.events { Some(synth_events(&video, self.contrast, &seq.windows)?) } else { None };
        Ok((seq, events))
    }

    /// Same scene with explicit averaging counts.
    pub fn generate_with_counts(&self, n_avg: &[usize]) -> Result<(LabeledSequence, Option<EventStream>)> {
        let video = self.video()?;
        let seq = sequence_from_counts(&video, &self.profile, n_avg, self.seed, self.anchor)?;
        let events = if self.events { Some(synth_events(&video, self.contrast, &seq.windows)?) } else { None };
        Ok((seq, events))
    }
}
