use nsf_tensor::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::config::{QuintupleSource, TrainConfig};
use super::metrics::psnr;
use super::optim::{adam_step, lr_schedule, AdamParams, AdamState};
use crate::datagen::{EventStream, Image, LabeledSequence};
use crate::detector::{self, build_quintuples, classify, Detector};
use crate::error::{config_err, CoreError, Result};
use crate::eventfusion::voxelize;
use crate::hybformer::{self, HybFormer};
use crate::layers::Rng64;

/// Frames per detector training segment.
pub const SEGMENT: usize = 5;

// distinct streams so detector and restorer runs with one seed stay independent
const DETECTOR_STREAM: u64 = 0x6465_7465;
const DEBLUR_STREAM: u64 = 0x6465_626c;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Detector: training accuracy after the epoch. Restorer: unused (NaN).
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub step_losses: Vec<f32>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,accuracy\n");
        for e in &self.epochs {
            s += &format!("{},{},{}\n", e.epoch, e.mean_loss, e.accuracy);
        }
        s
    }
}

/// Per-frame sharpness probabilities with the BiLSTM run over the whole video.
pub fn detect(det: &Detector, frames: &[Image]) -> Result<Vec<f32>> {
    if frames.is_empty() {
        return Err(CoreError::Data("no frames to classify".into()));
    }
    Ok(det.detect_probs(frames)?.0)
}

pub fn accuracy(det: &Detector, seqs: &[LabeledSequence], eps: f64) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for s in seqs {
        let pred = classify(&detect(det, &s.frames)?, eps);
        hit += pred.iter().zip(&s.labels).filter(|(a, b)| a == b).count();
        n += s.len();
    }
    Ok(hit as f64 / n.max(1) as f64)
}

/// Mean cosine between a frame's feature and its ground truth's feature over sharp
/// frames, minus the same over blurry frames.
pub fn cosine_margin(det: &Detector, seqs: &[LabeledSequence]) -> Result<f64> {
    let (mut sharp, mut blurry) = (Vec::new(), Vec::new());
    for s in seqs {
        for i in 0..s.len() {
            let a = det.extract(&s.frames[i])?;
            let b = det.extract(&s.gt_frames[i])?;
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(detector::COSINE_FLOOR);
            let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(detector::COSINE_FLOOR);
            if s.labels[i] == 1 { &mut sharp } else { &mut blurry }.push(dot / (na * nb));
        }
    }
    if sharp.is_empty() || blurry.is_empty() {
        return Err(CoreError::Data("margin needs both sharp and blurry frames".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&sharp) - mean(&blurry))
}

fn adam(cfg: &TrainConfig, lr: f64) -> AdamParams {
    AdamParams { lr, betas: cfg.betas, eps: cfg.adam_eps }
}

/// Cross-entropy plus `lambda` times the contrastive term on random 5-frame
/// segments; one epoch visits every sequence `ceil(len / 5)` times.
pub fn train_detector(cfg: &TrainConfig, seqs: &[LabeledSequence]) -> Result<(Detector, TrainLog)> {
    cfg.validate()?;
    if seqs.is_empty() || seqs.iter().any(LabeledSequence::is_empty) {
        return config_err("detector training needs at least one non-empty sequence");
    }
    let mut det = Detector::new(cfg.detector.clone(), cfg.seed)?;
    let mut rng = Rng64::seed_from_u64(cfg.seed ^ DETECTOR_STREAM);
    let mut state = AdamState::new();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = seqs.iter().enumerate().flat_map(|(i, s)| vec![i; s.len().div_ceil(SEGMENT)]).collect();
    for epoch in 0..cfg.detector_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &si in &order {
            let s = &seqs[si];
            let len = s.len().min(SEGMENT);
            let start = rng.random_range(0..=s.len() - len);
            let range = start..start + len;
            let mut g = Graph::<f32>::new();
            let p = det.params.bind(&mut g, true);
            let x = g.constant(detector::stack_images(&s.frames[range.clone()])?);
            let xg = g.constant(detector::stack_images(&s.gt_frames[range.clone()])?);
            let z = detector::extract_features(&mut g, &p, &det.cfg, x)?;
            let zg = detector::extract_features(&mut g, &p, &det.cfg, xg)?;
            let o = detector::sequence_probs(&mut g, &p, &det.cfg, z)?;
            let loss = detector::detector_loss(&mut g, o, &s.labels[range], z, zg, cfg.lambda)?;
            g.backward(loss)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(CoreError::Tensor(nsf_tensor::TensorError::Numeric(format!("detector loss {value} at epoch {epoch}"))));
            }
            adam_step(&mut det.params, &p.grads(&g), &mut state, adam(cfg, cfg.detector_lr))?;
            log.step_losses.push(value);
            total += value as f64;
        }
        let acc = accuracy(&det, seqs, cfg.eps)?;
        log.epochs.push(EpochLog { epoch, mean_loss: total / order.len() as f64, accuracy: acc });
    }
    Ok((det, log))
}

/// One restorer training example.
#[derive(Clone, Debug, PartialEq)]
pub struct DeblurSample {
    /// `(G⁻, B_{i-1}, B_i, B_{i+1}, G⁺)`.
    pub frames: [Image; 5],
    pub gt: Image,
    pub voxel: Option<Tensor>,
}

/// Per-sequence sharp labels: ground truth, or the detector's when selected.
pub fn quintuple_labels(cfg: &TrainConfig, seqs: &[LabeledSequence], det: Option<&Detector>) -> Result<Vec<Vec<u8>>> {
    match (cfg.quintuples, det) {
        (QuintupleSource::GroundTruth, _) => Ok(seqs.iter().map(|s| s.labels.clone()).collect()),
        (QuintupleSource::Detector, Some(d)) => seqs.iter().map(|s| Ok(classify(&detect(d, &s.frames)?, cfg.eps))).collect(),
        (QuintupleSource::Detector, None) => config_err("quintuples = detector needs a detector checkpoint"),
    }
}

/// One sample per frame of every sequence.
pub fn collect_samples(
    data: &[(LabeledSequence, Option<EventStream>)],
    labels: &[Vec<u8>],
    n: usize,
    events: bool,
) -> Result<Vec<DeblurSample>> {
    if data.len() != labels.len() {
        return Err(CoreError::Data(format!("{} sequences with {} label sets", data.len(), labels.len())));
    }
    let mut out = Vec::new();
    for ((seq, ev), lab) in data.iter().zip(labels) {
        let (h, w) = seq.dims();
        for q in build_quintuples(&seq.frames, lab, n)? {
            let voxel = match (events, ev) {
                (false, _) => None,
                (true, Some(ev)) => Some(voxelize(ev, seq.windows[q.center()], h, w)?),
                (true, None) => return config_err("events requested but the dataset has no events.csv"),
            };
            out.push(DeblurSample { frames: q.frames(&seq.frames).map(Clone::clone), gt: seq.gt_frames[q.center()].clone(), voxel });
        }
    }
    Ok(out)
}

/// `[C, H, W]` window at `(y, x)`.
pub fn crop(t: &Tensor, y: usize, x: usize, size: usize) -> Tensor {
    let s = t.shape();
    let (c, w) = (s[0], s[2]);
    let mut d = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in y..y + size {
            let row = (ch * s[1] + r) * w;
            d.extend_from_slice(&t.data()[row + x..row + x + size]);
        }
    }
    Tensor::new(&[c, size, size], d).expect("crop inside the tensor")
}

fn crop_sample(s: &DeblurSample, patch: usize, rng: &mut Rng64) -> DeblurSample {
    let sh = s.gt.shape();
    let y = rng.random_range(0..=sh[1] - patch);
    let x = rng.random_range(0..=sh[2] - patch);
    DeblurSample {
        frames: s.frames.each_ref().map(|f| crop(f, y, x, patch)),
        gt: crop(&s.gt, y, x, patch),
        voxel: s.voxel.as_ref().map(|v| crop(v, y, x, patch)),
    }
}

fn batch_of(s: &DeblurSample) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let frames = hybformer::stack5(s.frames.each_ref())?;
    let sh = s.gt.shape();
    let gt = s.gt.clone().reshape(&[1, sh[0], sh[1], sh[2]])?;
    let voxel = match &s.voxel {
        Some(v) => Some(v.clone().reshape(&[1, v.shape()[0], sh[1], sh[2]])?),
        None => None,
    };
    Ok((frames, gt, voxel))
}

fn accumulate(acc: &mut Option<ParamStore>, grads: ParamStore, scale: f32) {
    match acc {
        None => {
            let mut g = grads;
            g.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= scale));
            *acc = Some(g);
        }
        Some(a) => {
            for (name, t) in a.iter_mut() {
                let add = grads.get(name).expect("same parameter set");
                t.data_mut().iter_mut().zip(add.data()).for_each(|(x, y)| *x += y * scale);
            }
        }
    }
}

/// L1 training on random patch crops (one window shared by the five inputs, the
/// target and the voxel). Batches average per-sample gradients.
pub fn train_deblur(cfg: &TrainConfig, samples: &[DeblurSample]) -> Result<(HybFormer, TrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return config_err("restorer training needs at least one sample");
    }
    let sh = samples[0].gt.shape().to_vec();
    if cfg.patch > sh[1] || cfg.patch > sh[2] {
        return config_err(format!("patch {} exceeds frame size {}x{}", cfg.patch, sh[1], sh[2]));
    }
    for s in samples {
        if s.gt.shape() != sh.as_slice() || s.frames.iter().any(|f| f.shape() != sh.as_slice()) {
            return Err(CoreError::Data("training samples must share one frame size".into()));
        }
        if s.voxel.is_some() != cfg.model.events {
            return config_err(if cfg.model.events { "event model needs voxels in every sample" } else { "samples carry voxels but events are off" });
        }
    }
    let mut model = HybFormer::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = Rng64::seed_from_u64(cfg.seed ^ DEBLUR_STREAM);
    let mut state = AdamState::new();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut steps = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = lr_schedule(cfg.lr, epoch, cfg.lr_halve_every);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps > 0 && steps == cfg.max_steps {
                break 'epochs;
            }
            let mut acc = None;
            let mut batch_loss = 0.0f32;
            for &i in chunk {
                let s = crop_sample(&samples[i], cfg.patch, &mut rng);
                let (frames, gt, voxel) = batch_of(&s)?;
                let mut g = Graph::<f32>::new();
                let p = model.params.bind(&mut g, true);
                let x = g.constant(frames);
                let y = g.constant(gt);
                let v = voxel.map(|v| g.constant(v));
                let out = hybformer::forward(&mut g, &p, &model.cfg, x, v)?;
                let loss = hybformer::l1_loss(&mut g, out.image, y)?;
                g.backward(loss)?;
                batch_loss += g.value(loss).item() / chunk.len() as f32;
                accumulate(&mut acc, p.grads(&g), 1.0 / chunk.len() as f32);
            }
            if !batch_loss.is_finite() {
                return Err(CoreError::Tensor(nsf_tensor::TensorError::Numeric(format!("L1 {batch_loss} at step {steps}"))));
            }
            adam_step(&mut model.params, &acc.expect("non-empty batch"), &mut state, adam(cfg, lr))?;
            log.step_losses.push(batch_loss);
            total += batch_loss as f64;
            batches += 1;
            steps += 1;
        }
        log.epochs.push(EpochLog { epoch, mean_loss: total / batches as f64, accuracy: f64::NAN });
    }
    Ok((model, log))
}

/// Full-frame restorations of `samples`.
pub fn restore_samples(model: &HybFormer, samples: &[DeblurSample]) -> Result<Vec<Image>> {
    samples.iter().map(|s| model.restore(s.frames.each_ref(), s.voxel.as_ref())).collect()
}

/// Mean PSNR of restored frames and of the blurry centre frames against the targets.
pub fn psnr_gain(model: &HybFormer, samples: &[DeblurSample]) -> Result<(f64, f64)> {
    let restored = restore_samples(model, samples)?;
    let (mut r, mut b) = (0.0, 0.0);
    for (s, out) in samples.iter().zip(&restored) {
        r += psnr(&out.map(|v| v.clamp(0.0, 1.0)), &s.gt)?;
        b += psnr(&s.frames[2], &s.gt)?;
    }
    let n = samples.len() as f64;
    Ok((r / n, b / n))
}
