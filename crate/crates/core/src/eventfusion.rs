//! Event voxelization, the event encoder, and the attention-derived reweighting of
//! frame features.

use nsf_tensor::{BoundParams, Element, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::datagen::EventStream;
use crate::error::{CoreError, Result};
use crate::layers;

pub const TIME_BINS: usize = 20;
pub const VOXEL_CHANNELS: usize = 2 * TIME_BINS;

/// `[40, h, w]` event counts: bins 0..20 positive polarity, 20..40 negative.
pub fn voxelize(events: &EventStream, window: (i64, i64), h: usize, w: usize) -> Result<Tensor> {
    let (t0, t1) = window;
    if t1 <= t0 {
        return Err(CoreError::Data(format!("empty exposure window [{t0}, {t1}]")));
    }
    let mut data = vec![0f32; VOXEL_CHANNELS * h * w];
    let span = (t1 - t0) as f64;
    for (n, e) in events.records.iter().enumerate() {
        if e.t_us < t0 || e.t_us > t1 {
            continue;
        }
        if e.x as usize >= w || e.y as usize >= h {
            return Err(CoreError::Data(format!("event {n} at ({}, {}) outside {w}x{h}", e.x, e.y)));
        }
        let bin = ((TIME_BINS as f64 * (e.t_us - t0) as f64 / span).floor() as usize).min(TIME_BINS - 1);
        let plane = if e.p > 0 { bin } else { TIME_BINS + bin };
        data[(plane * h + e.y as usize) * w + e.x as usize] += 1.0;
    }
    Ok(Tensor::new(&[VOXEL_CHANNELS, h, w], data)?)
}

/// Five 3x3 convs; the second and third halve the resolution.
pub fn init(store: &mut ParamStore, rng: &mut impl Rng, channels: usize) {
    let widths = [(channels, VOXEL_CHANNELS), (2 * channels, channels), (4 * channels, 2 * channels)];
    for (i, &(out, inp)) in widths.iter().enumerate() {
        layers::init_conv(store, rng, &format!("event.enc.conv{i}"), out, inp, 3);
    }
    for i in 3..5 {
        layers::init_conv(store, rng, &format!("event.enc.conv{i}"), 4 * channels, 4 * channels, 3);
    }
    for name in ["q", "k", "v", "out"] {
        layers::init_conv(store, rng, &format!("event.fuse.{name}"), 4 * channels, 4 * channels, 1);
    }
}

/// `[1, 40, H, W]` voxel → `[1, 4C, H/4, W/4]` feature.
pub fn event_encode<T: Element>(g: &mut Graph<T>, p: &BoundParams, voxel: Var) -> Result<Var> {
    let mut h = voxel;
    for (i, stride) in [1, 2, 2, 1, 1].into_iter().enumerate() {
        h = layers::conv(g, p, &format!("event.enc.conv{i}"), h, stride)?;
        if i < 4 {
            h = g.gelu(h)?;
        }
    }
    Ok(h)
}

/// Reweighting map `R = σ(out(attn))` where, at every pixel, the channel vector of `f`
/// attends over the channel entries of `e`.
pub fn reweight_map<T: Element>(g: &mut Graph<T>, p: &BoundParams, f: Var, e: Var) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if g.shape(e) != shape.as_slice() {
        return Err(CoreError::Data(format!("event feature {:?} does not match frame feature {shape:?}", g.shape(e))));
    }
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let per_pixel = |g: &mut Graph<T>, x: Var, col: bool| -> Result<Var> {
        let t = g.reshape(x, &[c, hw])?;
        let t = g.permute(t, &[1, 0])?;
        Ok(g.reshape(t, &if col { [hw, c, 1] } else { [hw, 1, c] })?)
    };
    let q = layers::conv(g, p, "event.fuse.q", f, 1)?;
    let k = layers::conv(g, p, "event.fuse.k", e, 1)?;
    let v = layers::conv(g, p, "event.fuse.v", e, 1)?;
    let q = per_pixel(g, q, true)?;
    let k = per_pixel(g, k, false)?;
    let v = per_pixel(g, v, true)?;
    let scores = g.bmm(q, k)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let attn = g.softmax(scores, 2)?;
    let out = g.bmm(attn, v)?;
    let out = g.reshape(out, &[hw, c])?;
    let out = g.permute(out, &[1, 0])?;
    let out = g.reshape(out, &shape)?;
    let r = layers::conv(g, p, "event.fuse.out", out, 1)?;
    Ok(g.sigmoid(r)?)
}

/// `f ⊙ r + f`.
pub fn apply_reweight<T: Element>(g: &mut Graph<T>, f: Var, r: Var) -> Result<Var> {
    let fr = g.mul(f, r)?;
    Ok(g.add(fr, f)?)
}

/// Returns `f' = f ⊙ R + f` together with `R`.
pub fn event_fuse<T: Element>(g: &mut Graph<T>, p: &BoundParams, f: Var, e: Var) -> Result<(Var, Var)> {
    let r = reweight_map(g, p, f, e)?;
    Ok((apply_reweight(g, f, r)?, r))
}

/// `R` averaged over channels and resized to decoder scale `scale` (2 or 1).
pub fn reweight_at<T: Element>(g: &mut Graph<T>, r: Var, factor: usize) -> Result<Var> {
    let s = g.shape(r).to_vec();
    let m = g.mean_axis(r, 1)?;
    let m = g.reshape(m, &[1, 1, s[2], s[3]])?;
    Ok(g.resize_bilinear(m, factor)?)
}
