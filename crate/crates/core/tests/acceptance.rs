//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line straight to the
//! process stdout, so the verdicts show up even when cargo captures test output.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nsf_core::datagen::{BlurProfile, Event, EventStream, LabeledSequence, SynthConfig};
use nsf_core::detector::Detector;
use nsf_core::eventfusion::{event_fuse, voxelize, TIME_BINS, VOXEL_CHANNELS};
use nsf_core::harness::gradsuite::{op_cases, op_input, tiny_model_config, MODEL_STEP, OP_STEP, TOLERANCE};
use nsf_core::harness::pipeline::{run_pipeline, VideoInput};
use nsf_core::harness::train::psnr_gain;
use nsf_core::harness::{accuracy, collect_samples, cosine_margin, psnr, ssim, train_deblur, train_detector, DeblurSample, TrainConfig};
use nsf_core::hybformer::matching::{global_match, unfold_params};
use nsf_core::hybformer::{forward, l1_loss, HybConfig, HybFormer, Variant};
use nsf_core::layers::{zero_prefix, Rng64};
use nsf_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};

fn verdict(id: usize, name: &str, ok: bool, detail: &str) {
    let line = format!("{} [{id}] {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn uniform(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Central differences for every (or `per_input` evenly spaced) input entries,
/// compared with the tape's gradients; returns the worst relative error.
fn fd_worst(f: &dyn Fn(&mut Graph<f64>, &[Var]) -> f64, inputs: &[Tensor<f64>], h: f64, per_input: usize) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let _ = f(&mut g, &vars);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        f(&mut g, &vars)
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let n = xs[t].numel();
        let stride = n.div_ceil(per_input.min(n)).max(1);
        for i in (0..n).step_by(stride) {
            let x0 = xs[t].data()[i];
            xs[t].data_mut()[i] = x0 + h;
            let up = eval(&xs);
            xs[t].data_mut()[i] = x0 - h;
            let down = eval(&xs);
            xs[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    (worst, analytic)
}

#[test]
fn c01_gradient_suite() {
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let cases = op_cases();
    for (i, (name, shapes, op)) in cases.iter().enumerate() {
        let inputs: Vec<_> = shapes.iter().enumerate().map(|(j, s)| op_input(s, i, j)).collect();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = op(g, v).unwrap();
            let value = g.value(y).item();
            if g.requires_grad(y) {
                g.backward(y).unwrap();
            }
            value
        };
        let (err, _) = fd_worst(&f, &inputs, OP_STEP, usize::MAX);
        worst = worst.max(err);
        if err >= TOLERANCE {
            failures.push(format!("{name} {err:.2e}"));
        }
    }

    let model = HybFormer::new(tiny_model_config(Variant::Full), 11).unwrap();
    let store = model.params.cast::<f64>();
    let mut rng = Rng64::seed_from_u64(12);
    let frames = uniform(&mut rng, &[5, 3, 16, 16], 0.0, 1.0);
    let gt = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let cfg = model.cfg.clone();
    let loss = |g: &mut Graph<f64>, v: &[Var]| {
        let p = store.bind_existing(v);
        let x = g.constant(frames.clone());
        let y = g.constant(gt.clone());
        let out = forward(g, &p, &cfg, x, None).unwrap();
        let l = l1_loss(g, out.image, y).unwrap();
        let value = g.value(l).item();
        if g.requires_grad(l) {
            g.backward(l).unwrap();
        }
        value
    };
    let (e2e, grads) = fd_worst(&loss, &store.tensors(), MODEL_STEP, 3);
    let silent = grads.iter().filter(|t| t.data().iter().all(|&v| v == 0.0)).count();
    if e2e >= TOLERANCE {
        failures.push(format!("restorer L1 {e2e:.2e}"));
    }
    let elapsed = t.elapsed();
    let ok = failures.is_empty() && elapsed < Duration::from_secs(300);
    let detail = format!(
        "{} ops worst {worst:.2e}, restorer L1 {e2e:.2e} over {} tensors ({silent} with all-zero grad), {:.1}s{}",
        cases.len(),
        grads.len(),
        elapsed.as_secs_f64(),
        if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
    );
    verdict(1, "gradient suite", ok, &detail);
}

#[test]
fn c02_patch_counts_agree_across_scales() {
    let sizes = [16usize, 64, 240];
    let mut ok = true;
    let mut l240 = 0;
    let mut g = Graph::<f64>::new();
    for &h in &sizes {
        for &w in &sizes {
            let expected = (h / 4) * (w / 4);
            for scale in [1usize, 2, 3] {
                let (k, pad, stride) = unfold_params(scale).unwrap();
                let down = 1 << (scale - 1);
                let (mh, mw) = (h / down, w / down);
                let by_hand = ((mh + 2 * pad - k) / stride + 1) * ((mw + 2 * pad - k) / stride + 1);
                let x = g.constant(Tensor::zeros(&[1, 1, mh, mw]));
                let u = g.unfold(x, k, pad, stride).unwrap();
                let rows = g.shape(u)[0];
                ok &= by_hand == expected && rows == expected;
            }
            if (h, w) == (240, 240) {
                l240 = expected;
            }
        }
    }
    ok &= l240 == 3600;
    verdict(2, "patch count L equal at all three scales", ok, &format!("9 size pairs, L(240x240) = {l240}"));
}

#[test]
fn c03_fold_inverts_unfold() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = Rng64::seed_from_u64(seed);
        let base = [16usize, 64, 240][seed as usize % 3];
        let c = rng.random_range(1..=3);
        for scale in [1usize, 2, 3] {
            let (k, pad, stride) = unfold_params(scale).unwrap();
            let side = base >> (scale - 1);
            let mut g = Graph::<f64>::new();
            let x = g.constant(uniform(&mut rng, &[1, c, side, side], -1.0, 1.0));
            let p = g.unfold(x, k, pad, stride).unwrap();
            let y = g.fold(p, side, side, k, pad, stride).unwrap();
            worst = worst.max(g.value(y).max_abs_diff(g.value(x)));
        }
    }
    verdict(3, "fold of unfold is the identity", worst < 1e-6, &format!("100 seeds x 3 scales, max abs error {worst:.2e}"));
}

/// Zero-padded 3x3 patches in raster order, channel-major inside a patch.
fn patches3(map: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (c, h, w) = (map.shape()[1], map.shape()[2], map.shape()[3]);
    let at = |ch: usize, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            map.data()[(ch * h + y as usize) * w + x as usize]
        }
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut v = Vec::new();
            for ch in 0..c {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        v.push(at(ch, y + dy, x + dx));
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

#[test]
fn c04_global_matching_equals_exhaustive_search() {
    let (mut bad, mut ties) = (0, 0);
    for seed in 0..100u64 {
        let mut rng = Rng64::seed_from_u64(1000 + seed);
        let (h, w, c) = (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(1..=4));
        let f = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
        // odd seeds: constant reference map, so every interior patch is a duplicate
        let sharp = if seed % 2 == 1 { Tensor::full(&[1, c, h, w], 0.5) } else { uniform(&mut rng, &[1, c, h, w], -1.0, 1.0) };
        let q = patches3(&f);
        let k = patches3(&sharp);
        let mut want_idx = Vec::new();
        let mut want_sim = Vec::new();
        for row in &q {
            let sims: Vec<f64> = k.iter().map(|col| cosine(row, col)).collect();
            let top = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = sims.iter().position(|&s| s == top).unwrap();
            if sims.iter().filter(|&&s| s == top).count() > 1 {
                ties += 1;
            }
            want_idx.push(first);
            want_sim.push(top);
        }
        let mut g = Graph::<f64>::new();
        let fv = g.constant(f);
        let sv = g.constant(sharp);
        let got = global_match(&mut g, fv, sv).unwrap();
        let conf = g.value(got.confidence).data().to_vec();
        let sim_ok = conf.iter().zip(&want_sim).all(|(a, b)| (a - b).abs() < 1e-9);
        if got.index != want_idx || !sim_ok {
            bad += 1;
        }
    }
    verdict(4, "global matching oracle", bad == 0 && ties > 0, &format!("100 seeds, {bad} mismatching, {ties} tied rows resolved to the lowest index"));
}

fn toy_sequences(n: usize, base_seed: u64) -> Vec<LabeledSequence> {
    (0..n).map(|i| SynthConfig::new(64, 64, 10, BlurProfile::gopro_like(), base_seed + i as u64).generate().unwrap().0).collect()
}

#[test]
fn c05_detector_overfit_and_contrastive_margin() {
    let t = Instant::now();
    let train = toy_sequences(20, 100);
    let held = toy_sequences(6, 900);
    let mut cfg = TrainConfig::desk();
    cfg.detector_epochs = 20;
    let run = |lambda: f64| {
        let mut c = cfg.clone();
        c.lambda = lambda;
        train_detector(&c, &train).unwrap().0
    };
    let with: Detector = run(10.0);
    let without = run(0.0);
    let acc = accuracy(&with, &train, cfg.eps).unwrap();
    let m10 = cosine_margin(&with, &held).unwrap();
    let m0 = cosine_margin(&without, &held).unwrap();
    verdict(
        5,
        "detector overfit",
        acc >= 0.95 && m10 > m0,
        &format!("training accuracy {acc:.3}, held-out margin {m10:.4} (lambda 10) vs {m0:.4} (lambda 0), {:.0}s", t.elapsed().as_secs_f64()),
    );
}

/// Restorer overfit settings: desk preset, one 64x64 sequence, four blurry centers,
/// crops as large as the frame so the training loss is the full-frame loss.
const OVERFIT_STEPS: usize = 1000;
const OVERFIT_PATCH: usize = 64;

fn overfit_samples() -> Vec<DeblurSample> {
    let (seq, _) = SynthConfig::new(64, 64, 12, BlurProfile::gopro_like(), 7).generate().unwrap();
    let all = collect_samples(&[(seq.clone(), None)], std::slice::from_ref(&seq.labels), 7, false).unwrap();
    (0..seq.len()).filter(|&i| seq.labels[i] == 0).take(4).map(|i| all[i].clone()).collect()
}

fn overfit_config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.model.variant = variant;
    cfg.patch = OVERFIT_PATCH;
    cfg.max_steps = OVERFIT_STEPS;
    cfg
}

struct OverfitRun {
    first_loss: f32,
    tail_loss: f32,
    restored: f64,
    blurry: f64,
    secs: f64,
}

fn overfit(variant: Variant) -> OverfitRun {
    let t = Instant::now();
    let samples = overfit_samples();
    assert_eq!(samples.len(), 4);
    let (model, log) = train_deblur(&overfit_config(variant), &samples).unwrap();
    let l = &log.step_losses;
    let tail = &l[l.len().saturating_sub(20)..];
    let (restored, blurry) = psnr_gain(&model, &samples).unwrap();
    OverfitRun { first_loss: l[0], tail_loss: tail.iter().sum::<f32>() / tail.len() as f32, restored, blurry, secs: t.elapsed().as_secs_f64() }
}

/// The full-variant run is shared by the overfit and ablation criteria.
static FULL_RUN: OnceLock<OverfitRun> = OnceLock::new();

fn full_run() -> &'static OverfitRun {
    FULL_RUN.get_or_init(|| overfit(Variant::Full))
}

#[test]
fn c06_deblur_overfit() {
    let r = full_run();
    let drop = 1.0 - r.tail_loss / r.first_loss;
    let gain = r.restored - r.blurry;
    verdict(
        6,
        "deblur overfit",
        drop >= 0.8 && gain >= 2.0,
        &format!(
            "{OVERFIT_STEPS} steps, L1 {:.4} -> {:.4} ({:.1}% drop), PSNR {:.2} dB restored vs {:.2} dB blurry ({gain:+.2} dB), {:.0}s",
            r.first_loss,
            r.tail_loss,
            100.0 * drop,
            r.restored,
            r.blurry,
            r.secs
        ),
    );
}

#[test]
fn c07_ablation_direction() {
    let s = overfit(Variant::SelfOnly).restored;
    let c = overfit(Variant::CrossOnly).restored;
    let f = full_run().restored;
    let strict = s < c && c < f;
    verdict(
        7,
        "ablation direction",
        f >= c - 0.1 && c >= s - 0.1,
        &format!("{OVERFIT_STEPS} steps each: self_only {s:.2} dB, cross_only {c:.2} dB, full {f:.2} dB; strict ordering {}", if strict { "holds" } else { "does not hold" }),
    );
}

#[test]
fn c08_event_suite() {
    let mut rng = Rng64::seed_from_u64(8);
    let (h, w, window) = (24usize, 20usize, (1_000i64, 9_000i64));
    let mut mass_ok = true;
    for _ in 0..5 {
        let mut records: Vec<Event> = (0..1000)
            .map(|_| Event {
                t_us: rng.random_range(window.0..=window.1),
                x: rng.random_range(0..w as u32),
                y: rng.random_range(0..h as u32),
                p: if rng.random_bool(0.5) { 1 } else { -1 },
            })
            .collect();
        records.sort_by_key(|e| e.t_us);
        let mut per_pixel = vec![[0f32; 2]; h * w];
        for e in &records {
            per_pixel[e.y as usize * w + e.x as usize][usize::from(e.p < 0)] += 1.0;
        }
        let v = voxelize(&EventStream { records, windows: vec![window] }, window, h, w).unwrap();
        let d = v.data();
        mass_ok &= v.shape() == [VOXEL_CHANNELS, h, w] && d.iter().sum::<f32>() == 1000.0;
        for (pix, want) in per_pixel.iter().enumerate() {
            let pos: f32 = (0..TIME_BINS).map(|b| d[b * h * w + pix]).sum();
            let neg: f32 = (TIME_BINS..2 * TIME_BINS).map(|b| d[b * h * w + pix]).sum();
            mass_ok &= pos == want[0] && neg == want[1];
        }
    }

    let mut cfg = HybConfig::desk();
    cfg.events = true;
    let mut model = HybFormer::new(cfg.clone(), 3).unwrap();
    zero_prefix(&mut model.params, "event.fuse.out");
    let c4 = 4 * cfg.channels;
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, false);
    let f = g.constant(uniform(&mut rng, &[1, c4, 6, 5], -2.0, 2.0).cast());
    let e = g.constant(uniform(&mut rng, &[1, c4, 6, 5], -2.0, 2.0).cast());
    let (fused, _) = event_fuse(&mut g, &p, f, e).unwrap();
    let expect = g.value(f).map(|v| 1.5 * v);
    let zero_head_err = g.value(fused).max_abs_diff(&expect);

    let mut shapes_ok = true;
    for variant in Variant::ALL {
        let mut shapes = Vec::new();
        for events in [false, true] {
            let mut c = tiny_model_config(variant);
            c.events = events;
            let m = HybFormer::new(c.clone(), 4).unwrap();
            let mut g = Graph::<f32>::new();
            let p = m.params.bind(&mut g, false);
            let x = g.constant(uniform(&mut rng, &[5, 3, 16, 16], 0.0, 1.0).cast());
            let vox = events.then(|| g.constant(Tensor::full(&[1, VOXEL_CHANNELS, 16, 16], 1.0)));
            let out = forward(&mut g, &p, &c, x, vox).unwrap();
            let conf = out.matches.as_ref().map(|(a, b)| (g.shape(a.confidence).to_vec(), g.shape(b.confidence).to_vec(), a.index.len()));
            shapes.push((g.shape(out.image).to_vec(), g.shape(out.fused).to_vec(), conf));
        }
        shapes_ok &= shapes[0] == shapes[1] && shapes[0].0 == [1, 3, 16, 16];
    }
    verdict(
        8,
        "event suite",
        mass_ok && zero_head_err < 1e-6 && shapes_ok,
        &format!("voxel mass exact {mass_ok}, zero-head error {zero_head_err:.1e}, shapes unchanged for all variants {shapes_ok}"),
    );
}

/// Direct 11x11 Gaussian-window SSIM, no separability, valid mode.
fn reference_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    for ch in 0..c {
        let px = |t: &Tensor, y: usize, x: usize| t.data()[(ch * h + y) * w + x] as f64;
        let mut acc = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i][j] / total;
                        let (u, v) = (px(a, y + i, x + j), px(b, y + i, x + j));
                        mx += k * u;
                        my += k * v;
                        xx += k * u * u;
                        yy += k * v * v;
                        xy += k * u * v;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        sum += acc / count as f64;
    }
    sum / c as f64
}

#[test]
fn c09_metric_sanity() {
    let mut rng = Rng64::seed_from_u64(9);
    let zero = Tensor::zeros(&[3, 16, 16]);
    let p = psnr(&zero, &zero.map(|v| v + 0.1)).unwrap();
    let x: Tensor = uniform(&mut rng, &[3, 32, 24], 0.0, 1.0).cast();
    let self_sim = ssim(&x, &x).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let a: Tensor = uniform(&mut rng, &[3, 20, 27], 0.0, 1.0).cast();
        let noise: Tensor = uniform(&mut rng, &[3, 20, 27], -0.2, 0.2).cast();
        let b = Tensor::new(a.shape(), a.data().iter().zip(noise.data()).map(|(u, n)| (u + n).clamp(0.0, 1.0)).collect()).unwrap();
        worst = worst.max((ssim(&a, &b).unwrap() - reference_ssim(&a, &b)).abs());
    }
    let ok = (p - 20.0).abs() <= 1e-3 && (self_sim - 1.0).abs() < 1e-12 && worst < 1e-6;
    verdict(9, "metric sanity", ok, &format!("psnr offset 0.1 = {p:.4} dB, ssim(x, x) = {self_sim:.6}, max |ssim - reference| {worst:.1e}"));
}

#[test]
fn c10_pipeline_robustness() {
    let dir = tempfile::tempdir().unwrap();
    let mut det = Detector::new(TrainConfig::desk().detector, 1).unwrap();
    // a strongly negative head bias makes every frame read as blurry
    *det.params.get_mut("head.b").unwrap() = Tensor::full(&[1], -30.0);
    let model = HybFormer::new(HybConfig::desk(), 2).unwrap();
    let (seq, _) = SynthConfig::new(32, 32, 20, BlurProfile::gopro_like(), 5).generate_with_counts(&[9; 20]).unwrap();
    let video = VideoInput { frames: seq.frames.clone(), gt: Some(seq.gt_frames.clone()), events: None };

    let runs = run_pipeline(&det, &model, &video, &dir.path().join("blurry"), &[3], 0.5).unwrap();
    let r = &runs[0];
    let all_fallback = r.records.iter().all(|x| x.label == 0 && x.quintuple.used_fallback == (true, true));
    let blurry_ok = r.restored.len() == 20 && all_fallback && dir.path().join("blurry/metrics.csv").exists();

    let single = VideoInput { frames: vec![seq.frames[0].clone()], gt: Some(vec![seq.gt_frames[0].clone()]), events: None };
    let one = run_pipeline(&det, &model, &single, &dir.path().join("single"), &[3], 0.5).unwrap();
    let one_ok = one[0].restored.len() == 1 && one[0].records[0].quintuple.indices == [0; 5];

    let sweep_dir = dir.path().join("sweep");
    let sweep = run_pipeline(&det, &model, &video, &sweep_dir, &[3, 5, 7], 0.5).unwrap();
    let files: Vec<bool> = [3, 5, 7].iter().map(|n| sweep_dir.join(format!("n{n}/metrics.csv")).exists()).collect();
    let sweep_ok = sweep.len() == 3 && files.iter().all(|&b| b);
    verdict(
        10,
        "pipeline robustness",
        blurry_ok && one_ok && sweep_ok,
        &format!(
            "all-blurry 20 frames restored with fallback on both sides {blurry_ok}, 1-frame video clamped {one_ok}, n-sweep metric files {files:?}"
        ),
    );
}
