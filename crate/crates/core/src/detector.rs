//! Blur-aware frame classifier: strided CNN features, a bidirectional LSTM over the
//! sequence, and a sigmoid head. Also the nearest-sharp-neighbor search.

use nsf_tensor::{BoundParams, Element, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Uniform};

use crate::datagen::Image;
use crate::error::{config_err, CoreError, Result};
use crate::layers::{self, Rng64};

pub const CLAMP_EPS: f64 = 1e-7;
pub const COSINE_FLOOR: f64 = 1e-8;
pub const DEFAULT_EPS: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_RANGE: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Output channels of each stride-2 stage; the last is the feature size D.
    pub stages: Vec<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { stages: vec![8, 16, 32, 64] }
    }
}

impl DetectorConfig {
    pub fn feature_dim(&self) -> usize {
        *self.stages.last().expect("at least one stage")
    }

    pub fn hidden(&self) -> usize {
        self.feature_dim() / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.contains(&0) || !self.feature_dim().is_multiple_of(2) {
            return config_err(format!("detector stages {:?} need positive widths and an even D", self.stages));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let d = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| d.sample(rng) as f32).collect()).expect("positive shape")
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng64::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut inp = 3;
        for (i, &out) in cfg.stages.iter().enumerate() {
            // He-uniform keeps activations O(1) through the gelu stack
            let bound = (6.0 / (inp * 9) as f64).sqrt();
            p.insert(format!("feat.conv{i}.w"), uniform(&mut rng, &[out, inp, 3, 3], bound));
            p.insert(format!("feat.conv{i}.b"), Tensor::zeros(&[out]));
            inp = out;
        }
        let (d, h) = (cfg.feature_dim(), cfg.hidden());
        let bound = 1.0 / (h as f64).sqrt();
        for dir in ["fwd", "bwd"] {
            p.insert(format!("lstm.{dir}.wih"), uniform(&mut rng, &[d, 4 * h], bound));
            p.insert(format!("lstm.{dir}.whh"), uniform(&mut rng, &[h, 4 * h], bound));
            p.insert(format!("lstm.{dir}.b"), uniform(&mut rng, &[4 * h], bound));
        }
        p.insert("head.w", uniform(&mut rng, &[2 * h, 1], 1.0 / (2.0 * h as f64).sqrt()));
        p.insert("head.b", Tensor::zeros(&[1]));
        Ok(Detector { cfg, params: p })
    }

    /// Weights plus `config.*` entries.
    pub fn to_store(&self) -> ParamStore {
        let mut s = self.params.clone();
        layers::put_config(&mut s, "detector.stages", self.cfg.stages.len() as f64);
        for (i, &c) in self.cfg.stages.iter().enumerate() {
            layers::put_config(&mut s, &format!("detector.stage{i}"), c as f64);
        }
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let n = layers::get_config_usize(store, "detector.stages")?;
        let stages =
            (0..n).map(|i| layers::get_config_usize(store, &format!("detector.stage{i}"))).collect::<Result<_>>()?;
        let cfg = DetectorConfig { stages };
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in store.iter().filter(|(n, _)| layers::is_weight(n)) {
            params.insert(name, t.clone());
        }
        let fresh = Detector::new(cfg.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return config_err(format!("checkpoint parameter `{name}` missing or mis-shaped")),
            }
        }
        Ok(Detector { cfg, params })
    }

    /// Per-frame probabilities and features for a whole sequence, without gradients.
    pub fn detect_probs(&self, frames: &[Image]) -> Result<(Vec<f32>, Tensor)> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(stack_images(frames)?);
        let z = extract_features(&mut g, &p, &self.cfg, x)?;
        let o = sequence_probs(&mut g, &p, &self.cfg, z)?;
        Ok((g.value(o).data().to_vec(), g.value(z).clone()))
    }

    pub fn extract(&self, frame: &Image) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(stack_images(std::slice::from_ref(frame))?);
        let z = extract_features(&mut g, &p, &self.cfg, x)?;
        Ok(g.value(z).data().to_vec())
    }
}

/// `[N, 3, H, W]` batch from `[3, H, W]` images.
pub fn stack_images(frames: &[Image]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| CoreError::Data("empty frame list".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(frames.len() * first.numel());
    for f in frames {
        if f.shape() != shape.as_slice() {
            return Err(CoreError::Data(format!("frame shape {:?} differs from {:?}", f.shape(), shape)));
        }
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::new(&[frames.len(), shape[0], shape[1], shape[2]], data)?)
}

/// `[N, 3, H, W]` → `[N, D]`: per-frame channel means removed, then stride-2 convs,
/// gelu, and global average pooling.
pub fn extract_features<T: Element>(g: &mut Graph<T>, p: &BoundParams, cfg: &DetectorConfig, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let planes = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let mean = g.mean_axis(planes, 2)?;
    let mean = g.reshape(mean, &[s[0], s[1], 1, 1])?;
    let mut h = g.sub(x, mean)?;
    for i in 0..cfg.stages.len() {
        h = layers::conv(g, p, &format!("feat.conv{i}"), h, 2)?;
        h = g.gelu(h)?;
    }
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
    Ok(g.mean_axis(flat, 2)?)
}

fn lstm_direction<T: Element>(g: &mut Graph<T>, p: &BoundParams, dir: &str, z: Var, reverse: bool) -> Result<Vec<Var>> {
    let n = g.shape(z)[0];
    let whh = p.get(&format!("lstm.{dir}.whh"))?;
    let hidden = g.shape(whh)[0];
    let wih = p.get(&format!("lstm.{dir}.wih"))?;
    let b = p.get(&format!("lstm.{dir}.b"))?;
    let xw = g.matmul(z, wih)?;
    let xw = g.add(xw, b)?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, hidden]));
    let mut out = vec![h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xt = g.narrow(xw, 0, t, 1)?;
        let hw = g.matmul(h, whh)?;
        let gates = g.add(xt, hw)?;
        let i = g.narrow(gates, 1, 0, hidden)?;
        let i = g.sigmoid(i)?;
        let f = g.narrow(gates, 1, hidden, hidden)?;
        let f = g.sigmoid(f)?;
        let cand = g.narrow(gates, 1, 2 * hidden, hidden)?;
        let cand = g.tanh(cand)?;
        let o = g.narrow(gates, 1, 3 * hidden, hidden)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        h = g.mul(o, tc)?;
        out[t] = h;
    }
    Ok(out)
}

/// `[T, D]` features → `[T]` sharpness probabilities.
pub fn sequence_probs<T: Element>(g: &mut Graph<T>, p: &BoundParams, _cfg: &DetectorConfig, z: Var) -> Result<Var> {
    let fwd = lstm_direction(g, p, "fwd", z, false)?;
    let bwd = lstm_direction(g, p, "bwd", z, true)?;
    let hf = g.concat(&fwd, 0)?;
    let hb = g.concat(&bwd, 0)?;
    let hcat = g.concat(&[hf, hb], 1)?;
    let logit = layers::linear(g, p, "head", hcat)?;
    let o = g.sigmoid(logit)?;
    let n = g.shape(z)[0];
    Ok(g.reshape(o, &[n])?)
}

/// 1 = sharp, 0 = blurry; blurry iff `o < eps`.
pub fn classify(o: &[f32], eps: f64) -> Vec<u8> {
    o.iter().map(|&v| u8::from(v as f64 >= eps)).collect()
}

fn label_mask<T: Element>(g: &mut Graph<T>, labels: &[u8], positive: bool) -> Result<Var> {
    let data: Vec<f64> = labels.iter().map(|&l| if (l == 1) == positive { 1.0 } else { 0.0 }).collect();
    Ok(g.constant(Tensor::from_f64(&[labels.len()], &data)?))
}

/// Summed binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss_ce<T: Element>(g: &mut Graph<T>, o: Var, labels: &[u8]) -> Result<Var> {
    if g.shape(o) != [labels.len()] {
        return Err(CoreError::Data(format!("{} labels for probabilities {:?}", labels.len(), g.shape(o))));
    }
    let oc = g.clamp(o, CLAMP_EPS, 1.0 - CLAMP_EPS)?;
    let log_o = g.log(oc)?;
    let one_minus = g.affine(oc, -1.0, 1.0)?;
    let log_1mo = g.log(one_minus)?;
    let pos = label_mask(g, labels, true)?;
    let neg = label_mask(g, labels, false)?;
    let a = g.mul(log_o, pos)?;
    let b = g.mul(log_1mo, neg)?;
    let s = g.add(a, b)?;
    let total = g.sum(s)?;
    Ok(g.scale(total, -1.0)?)
}

/// Row-wise cosine similarity of two `[T, D]` matrices, `[T]`.
pub fn cosines<T: Element>(g: &mut Graph<T>, z: Var, z_gt: Var) -> Result<Var> {
    let a = g.normalize_rows(z, COSINE_FLOOR)?;
    let b = g.normalize_rows(z_gt, COSINE_FLOOR)?;
    let prod = g.mul(a, b)?;
    Ok(g.sum_axis(prod, 1)?)
}

/// `-log(Σ_sharp e^cos / Σ_all e^cos)`; zero when no frame is sharp.
/// Gradients do not flow into `z_gt`.
pub fn loss_contrastive<T: Element>(g: &mut Graph<T>, z: Var, z_gt: Var, labels: &[u8]) -> Result<Var> {
    let z_gt = g.detach(z_gt);
    let cos = cosines(g, z, z_gt)?;
    contrastive_from_cosines(g, cos, labels)
}

pub fn contrastive_from_cosines<T: Element>(g: &mut Graph<T>, cos: Var, labels: &[u8]) -> Result<Var> {
    if g.shape(cos) != [labels.len()] {
        return Err(CoreError::Data(format!("{} labels for cosines {:?}", labels.len(), g.shape(cos))));
    }
    if !labels.contains(&1) {
        return Ok(g.constant(Tensor::zeros(&[1])));
    }
    let e = g.exp(cos)?;
    let sharp = label_mask(g, labels, true)?;
    let es = g.mul(e, sharp)?;
    let num = g.sum(es)?;
    let den = g.sum(e)?;
    let ln_num = g.log(num)?;
    let ln_den = g.log(den)?;
    Ok(g.sub(ln_den, ln_num)?)
}

/// `L_ce + lambda * L_contra`.
pub fn detector_loss<T: Element>(
    g: &mut Graph<T>,
    o: Var,
    labels: &[u8],
    z: Var,
    z_gt: Var,
    lambda: f64,
) -> Result<Var> {
    let ce = loss_ce(g, o, labels)?;
    let con = loss_contrastive(g, z, z_gt, labels)?;
    let con = g.scale(con, lambda)?;
    Ok(g.add(ce, con)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharpNeighbors {
    pub minus: usize,
    pub plus: usize,
    /// Per direction (minus, plus): no sharp frame within range, `i ∓ 2` used instead.
    pub used_fallback: (bool, bool),
}

/// Nearest sharp frame within `n` on each side of `i`, ignoring frame `i` itself.
pub fn select_sharp_neighbors(labels: &[u8], i: usize, n: usize) -> SharpNeighbors {
    let last = labels.len() - 1;
    let minus = (1..=n).take_while(|&d| d <= i).map(|d| i - d).find(|&j| labels[j] == 1);
    let plus = (1..=n).map(|d| i + d).take_while(|&j| j <= last).find(|&j| labels[j] == 1);
    SharpNeighbors {
        minus: minus.unwrap_or(i.saturating_sub(2)),
        plus: plus.unwrap_or((i + 2).min(last)),
        used_fallback: (minus.is_none(), plus.is_none()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quintuple {
    /// `(g_minus, i - 1, i, i + 1, g_plus)`.
    pub indices: [usize; 5],
    pub used_fallback: (bool, bool),
}

impl Quintuple {
    pub fn center(&self) -> usize {
        self.indices[2]
    }

    pub fn frames<'a>(&self, frames: &'a [Image]) -> [&'a Image; 5] {
        self.indices.map(|i| &frames[i])
    }
}

/// One quintuple per frame, neighbors clamped at the sequence ends.
pub fn build_quintuples(frames: &[Image], labels: &[u8], n: usize) -> Result<Vec<Quintuple>> {
    if frames.is_empty() || frames.len() != labels.len() {
        return Err(CoreError::Data(format!("{} frames with {} labels", frames.len(), labels.len())));
    }
    let last = labels.len() - 1;
    Ok((0..labels.len())
        .map(|i| {
            let s = select_sharp_neighbors(labels, i, n);
            Quintuple {
                indices: [s.minus, i.saturating_sub(1), i, (i + 1).min(last), s.plus],
                used_fallback: s.used_fallback,
            }
        })
        .collect())
}
