//! Restoration network: a three-scale CNN encoder, cross-attention fusion of the two
//! temporal neighbors at quarter resolution, global patch matching against the two
//! nearest sharp frames, and a decoder that transfers matched sharp features at every
//! scale.
//!
//! Parameter names:
//!
//! | prefix | content |
//! |---|---|
//! | `encoder.s{1,2,3}.conv0`, `encoder.s{1,2,3}.res0.conv{0,1}` | encoder stages |
//! | `cswt.block{b}.layer{l}.{norm_q,norm_kv,norm_mlp,qproj,kproj,vproj,proj,fc1,fc2,rpb}` | attention layers |
//! | `cswt.block{b}.conv`, `cswt.{in,out}` | block convs, optional width projections |
//! | `fuse.conv` | neighbor fusion |
//! | `agg.s{3,2,1}.{plus,minus}.conv` | matched-feature aggregation |
//! | `decoder.s{2,1}.res{0,1,2}`, `decoder.s{2,1}.up` | decoder stages |
//! | `head.res{0,1,2}`, `head.conv` | output head |
//! | `event.enc.conv{0..4}`, `event.fuse.{q,k,v,out}` | event branch |
//! | `config.hyb.*` | hyperparameters (checkpoints only) |

pub mod cswt;
pub mod matching;

use nsf_tensor::{BoundParams, Element, Graph, ParamStore, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};

use crate::datagen::Image;
use crate::error::{config_err, Result};
use crate::eventfusion;
use crate::layers::{self, Rng64};
pub use cswt::CswtConfig;
pub use matching::{aggregate, fold_by_index, global_match, MatchResult};

/// Ablation wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Self-attention on the current frame, no global matching.
    SelfOnly,
    /// Self-attention on the current frame plus global matching.
    SelfPlusGlobal,
    /// Neighbor cross-attention, no global matching.
    CrossOnly,
    /// Neighbor cross-attention plus global matching.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SelfOnly, Variant::SelfPlusGlobal, Variant::CrossOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SelfOnly => "self_only",
            Variant::SelfPlusGlobal => "self_plus_global",
            Variant::CrossOnly => "cross_only",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| crate::CoreError::Config(format!("unknown variant `{s}`")))
    }

    pub fn code(self) -> usize {
        Variant::ALL.iter().position(|&v| v == self).expect("listed")
    }

    pub fn uses_neighbors(self) -> bool {
        matches!(self, Variant::CrossOnly | Variant::Full)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, Variant::SelfPlusGlobal | Variant::Full)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybConfig {
    /// Width C of the full-resolution features (2C and 4C at the coarser scales).
    pub channels: usize,
    pub cswt: CswtConfig,
    pub variant: Variant,
    pub events: bool,
}

impl HybConfig {
    pub fn desk() -> Self {
        HybConfig {
            channels: 8,
            cswt: CswtConfig { n_castb: 2, n_cstl_per_block: 2, heads: 4, window: 8, embed_dim: 32, mlp_ratio: 2.0 },
            variant: Variant::Full,
            events: false,
        }
    }

    pub fn published() -> Self {
        HybConfig {
            channels: 32,
            cswt: CswtConfig { n_castb: 6, n_cstl_per_block: 6, heads: 8, window: 8, embed_dim: 128, mlp_ratio: 2.0 },
            variant: Variant::Full,
            events: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return config_err("channels must be positive");
        }
        self.cswt.validate()
    }

    fn put(&self, s: &mut ParamStore) {
        let c = &self.cswt;
        for (k, v) in [
            ("channels", self.channels as f64),
            ("n_castb", c.n_castb as f64),
            ("n_cstl", c.n_cstl_per_block as f64),
            ("heads", c.heads as f64),
            ("window", c.window as f64),
            ("embed_dim", c.embed_dim as f64),
            ("mlp_ratio", c.mlp_ratio),
            ("variant", self.variant.code() as f64),
            ("events", f64::from(u8::from(self.events))),
        ] {
            layers::put_config(s, &format!("hyb.{k}"), v);
        }
    }

    fn get(s: &ParamStore) -> Result<Self> {
        let u = |k: &str| layers::get_config_usize(s, &format!("hyb.{k}"));
        let code = u("variant")?;
        let variant = *Variant::ALL
            .get(code)
            .ok_or_else(|| crate::CoreError::Config(format!("variant code {code} out of range")))?;
        Ok(HybConfig {
            channels: u("channels")?,
            cswt: CswtConfig {
                n_castb: u("n_castb")?,
                n_cstl_per_block: u("n_cstl")?,
                heads: u("heads")?,
                window: u("window")?,
                embed_dim: u("embed_dim")?,
                mlp_ratio: layers::get_config(s, "hyb.mlp_ratio")?,
            },
            variant,
            events: u("events")? == 1,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybFormer {
    pub cfg: HybConfig,
    pub params: ParamStore,
}

fn init_params(cfg: &HybConfig, rng: &mut impl Rng) -> ParamStore {
    let mut s = ParamStore::new();
    let c = cfg.channels;
    for (scale, (out, inp)) in [(1, (c, 3)), (2, (2 * c, c)), (3, (4 * c, 2 * c))] {
        layers::init_conv(&mut s, rng, &format!("encoder.s{scale}.conv0"), out, inp, 3);
        layers::init_resblock(&mut s, rng, &format!("encoder.s{scale}.res0"), out);
    }
    cswt::init(&mut s, rng, &cfg.cswt, 4 * c);
    layers::init_conv(&mut s, rng, "fuse.conv", 4 * c, 12 * c, 3);
    if cfg.variant.uses_global() {
        for (scale, ch) in [(3, 4 * c), (2, 2 * c), (1, c)] {
            for dir in ["plus", "minus"] {
                layers::init_conv(&mut s, rng, &format!("agg.s{scale}.{dir}.conv"), ch, 2 * ch, 3);
            }
        }
    }
    for (scale, ch) in [(2, 4 * c), (1, 2 * c)] {
        for r in 0..3 {
            layers::init_resblock(&mut s, rng, &format!("decoder.s{scale}.res{r}"), ch);
        }
        layers::init_conv(&mut s, rng, &format!("decoder.s{scale}.up"), ch / 2, ch, 2);
    }
    for r in 0..3 {
        layers::init_resblock(&mut s, rng, &format!("head.res{r}"), c);
    }
    layers::init_conv(&mut s, rng, "head.conv", 3, c, 3);
    if cfg.events {
        eventfusion::init(&mut s, rng, c);
    }
    s
}

impl HybFormer {
    pub fn new(cfg: HybConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng64::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng);
        Ok(HybFormer { cfg, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = self.params.clone();
        self.cfg.put(&mut s);
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let cfg = HybConfig::get(store)?;
        cfg.validate()?;
        let reference = init_params(&cfg, &mut Rng64::seed_from_u64(0));
        let mut params = ParamStore::new();
        for (name, t) in reference.iter() {
            match store.get(name) {
                Some(v) if v.shape() == t.shape() => params.insert(name, v.clone()),
                _ => return config_err(format!("checkpoint parameter `{name}` missing or mis-shaped")),
            }
        }
        Ok(HybFormer { cfg, params })
    }

    /// Restores the center frame of `frames` = `[G⁻, B_{i-1}, B_i, B_{i+1}, G⁺]`;
    /// `voxel` is `[40, H, W]`.
    pub fn restore(&self, frames: [&Image; 5], voxel: Option<&Tensor>) -> Result<Image> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(stack5(frames)?);
        let v = match voxel {
            Some(t) => {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                Some(g.constant(t.clone().reshape(&s)?))
            }
            None => None,
        };
        let out = forward(&mut g, &p, &self.cfg, x, v)?;
        let s = g.value(out.image).shape().to_vec();
        Ok(g.value(out.image).clone().reshape(&s[1..])?)
    }
}

/// `[5, 3, H, W]` from five `[3, H, W]` frames.
pub fn stack5(frames: [&Image; 5]) -> Result<Tensor> {
    let owned: Vec<Image> = frames.iter().map(|&f| f.clone()).collect();
    crate::detector::stack_images(&owned)
}

/// Feature maps at the three scales, batched like the input.
#[derive(Clone, Copy, Debug)]
pub struct ScaleFeatures {
    pub s1: Var,
    pub s2: Var,
    pub s3: Var,
}

/// `[N, 3, H, W]` → `[N, C, H, W]`, `[N, 2C, H/2, W/2]`, `[N, 4C, H/4, W/4]`.
pub fn encode<T: Element>(g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<ScaleFeatures> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
        return Err(TensorError::Shape(format!("encoder input must be [N, 3, H, W] with H, W multiples of 4, got {s:?}")).into());
    }
    let mut feats = Vec::with_capacity(3);
    let mut h = x;
    for scale in 1..=3 {
        h = layers::conv(g, p, &format!("encoder.s{scale}.conv0"), h, if scale == 1 { 1 } else { 2 })?;
        h = g.gelu(h)?;
        h = layers::resblock(g, p, &format!("encoder.s{scale}.res0"), h)?;
        feats.push(h);
    }
    Ok(ScaleFeatures { s1: feats[0], s2: feats[1], s3: feats[2] })
}

/// `conv(cat(b'₋, b_cur, b'₊))`.
pub fn fuse_neighbors<T: Element>(g: &mut Graph<T>, p: &BoundParams, prev: Var, cur: Var, next: Var) -> Result<Var> {
    let cat = g.concat_channels(&[prev, cur, next])?;
    layers::conv(g, p, "fuse.conv", cat, 1)
}

/// Per-direction context for the decoder: sharp-frame features and the match.
#[derive(Clone, Debug)]
pub struct SharpContext {
    pub s2: Var,
    pub s1: Var,
    pub matched: MatchResult,
}

fn transfer<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    scale: usize,
    x: Var,
    maps: [Var; 2],
    plus: &SharpContext,
    minus: &SharpContext,
) -> Result<Var> {
    let gp = fold_by_index(g, maps[0], &plus.matched.index, scale)?;
    let gm = fold_by_index(g, maps[1], &minus.matched.index, scale)?;
    let mp = matching::confidence_at(g, plus.matched.confidence, scale)?;
    let mm = matching::confidence_at(g, minus.matched.confidence, scale)?;
    aggregate(g, p, &format!("agg.s{scale}"), x, gp, gm, mp, mm)
}

/// Decoder from the scale-3 feature to a `[1, 3, H, W]` image. `sharp` carries the
/// `(plus, minus)` contexts when global matching is active; `reweight` is the event
/// map applied before each aggregation.
pub fn decode<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    d3: Var,
    sharp: Option<(&SharpContext, &SharpContext)>,
    reweight: Option<Var>,
) -> Result<Var> {
    let mut d = d3;
    for (scale, factor) in [(2, 2), (1, 4)] {
        for r in 0..3 {
            d = layers::resblock(g, p, &format!("decoder.s{scale}.res{r}"), d)?;
        }
        d = layers::conv_transpose(g, p, &format!("decoder.s{scale}.up"), d)?;
        if let Some(r) = reweight {
            let rs = eventfusion::reweight_at(g, r, factor)?;
            d = eventfusion::apply_reweight(g, d, rs)?;
        }
        if let Some((plus, minus)) = sharp {
            let maps = if scale == 2 { [plus.s2, minus.s2] } else { [plus.s1, minus.s1] };
            d = transfer(g, p, scale, d, maps, plus, minus)?;
        }
    }
    for r in 0..3 {
        d = layers::resblock(g, p, &format!("head.res{r}"), d)?;
    }
    layers::conv(g, p, "head.conv", d, 1)
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[1, 3, H, W]`, unclamped.
    pub image: Var,
    /// `(plus, minus)` matches when global matching ran.
    pub matches: Option<(MatchResult, MatchResult)>,
    pub fused: Var,
}

/// Full restoration of one quintuple `[5, 3, H, W]` (order `G⁻, B_{i-1}, B_i, B_{i+1}, G⁺`),
/// optionally with the `[1, 40, H, W]` event voxel of the center frame.
pub fn forward<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &HybConfig,
    frames: Var,
    voxel: Option<Var>,
) -> Result<ForwardOut> {
    if g.shape(frames)[0] != 5 {
        return Err(TensorError::Shape(format!("expected 5 frames, got {:?}", g.shape(frames))).into());
    }
    if voxel.is_some() != cfg.events {
        return config_err(if cfg.events { "model expects an event voxel" } else { "model has no event branch" });
    }
    let feats = encode(g, p, frames)?;
    let pick = |g: &mut Graph<T>, v: Var, i: usize| g.narrow(v, 0, i, 1);
    let cur = pick(g, feats.s3, 2)?;
    let mut f = if cfg.variant.uses_neighbors() {
        let prev = pick(g, feats.s3, 1)?;
        let next = pick(g, feats.s3, 3)?;
        let bp = cswt::cswt_forward(g, p, &cfg.cswt, cur, prev)?;
        let bn = cswt::cswt_forward(g, p, &cfg.cswt, cur, next)?;
        fuse_neighbors(g, p, bp, cur, bn)?
    } else {
        let bs = cswt::cswt_forward(g, p, &cfg.cswt, cur, cur)?;
        fuse_neighbors(g, p, bs, cur, bs)?
    };
    let mut reweight = None;
    if let Some(v) = voxel {
        let e = eventfusion::event_encode(g, p, v)?;
        let (fp, r) = eventfusion::event_fuse(g, p, f, e)?;
        f = fp;
        reweight = Some(r);
    }
    if !cfg.variant.uses_global() {
        let image = decode(g, p, f, None, reweight)?;
        return Ok(ForwardOut { image, matches: None, fused: f });
    }
    let mut ctx = Vec::with_capacity(2);
    for idx in [4, 0] {
        let g3 = pick(g, feats.s3, idx)?;
        let matched = global_match(g, f, g3)?;
        ctx.push(SharpContext { s2: pick(g, feats.s2, idx)?, s1: pick(g, feats.s1, idx)?, matched });
    }
    let (plus, minus) = (&ctx[0], &ctx[1]);
    let g3p = pick(g, feats.s3, 4)?;
    let g3m = pick(g, feats.s3, 0)?;
    let d3 = transfer(g, p, 3, f, [g3p, g3m], plus, minus)?;
    let image = decode(g, p, d3, Some((plus, minus)), reweight)?;
    Ok(ForwardOut { image, matches: Some((plus.matched.clone(), minus.matched.clone())), fused: f })
}

/// Mean absolute error.
pub fn l1_loss<T: Element>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(TensorError::Shape(format!("l1 of {:?} vs {:?}", g.shape(pred), g.shape(gt))).into());
    }
    let d = g.sub(pred, gt)?;
    let a = g.abs(d)?;
    Ok(g.mean(a)?)
}

#[cfg(test)]
mod tests;
