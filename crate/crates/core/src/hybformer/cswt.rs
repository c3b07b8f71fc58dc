//! Shifted-window cross-attention: queries from a neighbor frame, keys and values
//! from the current frame, over non-overlapping windows that alternate between a
//! regular and a half-window cyclic shift.

use nsf_tensor::{BoundParams, Element, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{config_err, Result};
use crate::layers;

/// Added to attention logits between positions that must not interact.
pub const MASK_VALUE: f64 = -1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct CswtConfig {
    pub n_castb: usize,
    pub n_cstl_per_block: usize,
    pub heads: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
}

impl CswtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_castb == 0 || self.n_cstl_per_block == 0 || !self.n_cstl_per_block.is_multiple_of(2) {
            return config_err(format!(
                "need at least one block and an even, positive layer count per block (got {} x {})",
                self.n_castb, self.n_cstl_per_block
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return config_err(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.window < 2 || self.mlp_ratio <= 0.0 {
            return config_err("window must be at least 2 and mlp_ratio positive");
        }
        Ok(())
    }

    pub fn shift(&self) -> usize {
        self.window / 2
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    fn layer_name(&self, block: usize, layer: usize) -> String {
        format!("cswt.block{block}.layer{layer}")
    }
}

/// Registers all weights; `channels` is the width of the incoming feature maps.
pub fn init(store: &mut ParamStore, rng: &mut impl Rng, cfg: &CswtConfig, channels: usize) {
    let e = cfg.embed_dim;
    if e != channels {
        layers::init_conv(store, rng, "cswt.in", e, channels, 1);
        layers::init_conv(store, rng, "cswt.out", channels, e, 1);
    }
    let table = (2 * cfg.window - 1).pow(2);
    for b in 0..cfg.n_castb {
        for l in 0..cfg.n_cstl_per_block {
            let n = cfg.layer_name(b, l);
            for norm in ["norm_q", "norm_kv", "norm_mlp"] {
                layers::init_norm(store, &format!("{n}.{norm}"), e);
            }
            for proj in ["qproj", "kproj", "vproj", "proj"] {
                layers::init_linear(store, rng, &format!("{n}.{proj}"), e, e);
            }
            store.insert(format!("{n}.rpb"), layers::trunc_normal(rng, &[table, cfg.heads]));
            layers::init_linear(store, rng, &format!("{n}.fc1"), e, cfg.mlp_hidden());
            layers::init_linear(store, rng, &format!("{n}.fc2"), cfg.mlp_hidden(), e);
        }
        layers::init_conv(store, rng, &format!("cswt.block{b}.conv"), e, e, 3);
    }
}

/// Geometry of one window partition of an `h x w` token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Windows {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
}

impl Windows {
    pub fn padded(&self) -> (usize, usize) {
        (self.h.div_ceil(self.window) * self.window, self.w.div_ceil(self.window) * self.window)
    }

    pub fn count(&self) -> usize {
        let (hp, wp) = self.padded();
        (hp / self.window) * (wp / self.window)
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Group label of each padded position after the cyclic shift: positions may attend
    /// to each other only when their labels agree. Labels separate wrapped-around
    /// strips and zero-padding from the real map.
    pub fn labels(&self) -> Vec<usize> {
        let (hp, wp) = self.padded();
        let band = |i: usize, n: usize| -> usize {
            if self.shift == 0 || i < n - self.window {
                0
            } else if i < n - self.shift {
                1
            } else {
                2
            }
        };
        let mut out = Vec::with_capacity(hp * wp);
        for y in 0..hp {
            for x in 0..wp {
                let (oy, ox) = ((y + self.shift) % hp, (x + self.shift) % wp);
                let pad = usize::from(oy >= self.h || ox >= self.w);
                out.push((band(y, hp) * 3 + band(x, wp)) * 2 + pad);
            }
        }
        out
    }

    /// `[count, 1, n, n]` additive mask in window order, or `None` when nothing is masked.
    pub fn mask(&self) -> Option<Tensor<f64>> {
        let (hp, wp) = self.padded();
        if self.shift == 0 && (hp, wp) == (self.h, self.w) {
            return None;
        }
        let labels = self.labels();
        let (win, n) = (self.window, self.tokens());
        let mut data = Vec::with_capacity(self.count() * n * n);
        for wy in 0..hp / win {
            for wx in 0..wp / win {
                let ids: Vec<usize> =
                    (0..n).map(|t| labels[(wy * win + t / win) * wp + wx * win + t % win]).collect();
                for &a in &ids {
                    data.extend(ids.iter().map(|&b| if a == b { 0.0 } else { MASK_VALUE }));
                }
            }
        }
        Some(Tensor::new(&[self.count(), 1, n, n], data).expect("positive"))
    }
}

/// Row of the relative-position table for each (query, key) pair in a window.
pub fn relative_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = i / window + window - 1 - j / window;
            let dx = i % window + window - 1 - j % window;
            out.push(dy * span + dx);
        }
    }
    out
}

/// `[h*w, E]` tokens → `[count * heads, n, E / heads]` window batches.
pub fn partition<T: Element>(g: &mut Graph<T>, x: Var, win: Windows, heads: usize) -> Result<Var> {
    let e = g.shape(x)[1];
    let (hp, wp) = win.padded();
    let s = win.window;
    let mut t = g.reshape(x, &[win.h, win.w, e])?;
    if hp > win.h {
        t = g.pad(t, 0, 0, hp - win.h)?;
    }
    if wp > win.w {
        t = g.pad(t, 1, 0, wp - win.w)?;
    }
    if win.shift > 0 {
        t = g.roll(t, 0, -(win.shift as isize))?;
        t = g.roll(t, 1, -(win.shift as isize))?;
    }
    let t = g.reshape(t, &[hp / s, s, wp / s, s, e])?;
    let t = g.permute(t, &[0, 2, 1, 3, 4])?;
    let t = g.reshape(t, &[win.count(), s * s, heads, e / heads])?;
    let t = g.permute(t, &[0, 2, 1, 3])?;
    Ok(g.reshape(t, &[win.count() * heads, s * s, e / heads])?)
}

/// Inverse of [`partition`]: back to `[h*w, E]`.
pub fn merge<T: Element>(g: &mut Graph<T>, x: Var, win: Windows, heads: usize) -> Result<Var> {
    let dh = g.shape(x)[2];
    let e = dh * heads;
    let (hp, wp) = win.padded();
    let s = win.window;
    let t = g.reshape(x, &[win.count(), heads, s * s, dh])?;
    let t = g.permute(t, &[0, 2, 1, 3])?;
    let t = g.reshape(t, &[hp / s, wp / s, s, s, e])?;
    let t = g.permute(t, &[0, 2, 1, 3, 4])?;
    let mut t = g.reshape(t, &[hp, wp, e])?;
    if win.shift > 0 {
        t = g.roll(t, 0, win.shift as isize)?;
        t = g.roll(t, 1, win.shift as isize)?;
    }
    if hp > win.h {
        t = g.narrow(t, 0, 0, win.h)?;
    }
    if wp > win.w {
        t = g.narrow(t, 1, 0, win.w)?;
    }
    Ok(g.reshape(t, &[win.h * win.w, e])?)
}

/// Windowed multi-head attention of normalized query tokens over normalized key/value
/// tokens. Returns the projected output `[h*w, E]` and the attention weights
/// `[count, heads, n, n]`.
pub fn window_attention<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    xq: Var,
    xkv: Var,
    win: Windows,
    heads: usize,
) -> Result<(Var, Var)> {
    let e = g.shape(xq)[1];
    let dh = e / heads;
    let n = win.tokens();
    let q = layers::linear(g, p, &format!("{name}.qproj"), xq)?;
    let q = g.scale(q, 1.0 / (dh as f64).sqrt())?;
    let k = layers::linear(g, p, &format!("{name}.kproj"), xkv)?;
    let v = layers::linear(g, p, &format!("{name}.vproj"), xkv)?;
    let q = partition(g, q, win, heads)?;
    let k = partition(g, k, win, heads)?;
    let v = partition(g, v, win, heads)?;
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let scores = g.reshape(scores, &[win.count(), heads, n, n])?;

    let table = p.get(&format!("{name}.rpb"))?;
    let bias = g.gather_rows(table, &relative_index(win.window))?;
    let bias = g.permute(bias, &[1, 0])?;
    let bias = g.reshape(bias, &[heads, n, n])?;
    let mut scores = g.add(scores, bias)?;
    if let Some(mask) = win.mask() {
        let mask = g.constant(mask.cast());
        scores = g.add(scores, mask)?;
    }
    let attn = g.softmax(scores, 3)?;
    let flat = g.reshape(attn, &[win.count() * heads, n, n])?;
    let out = g.bmm(flat, v)?;
    let out = merge(g, out, win, heads)?;
    let out = layers::linear(g, p, &format!("{name}.proj"), out)?;
    Ok((out, attn))
}

/// One layer: `x += MCA(LN(x), LN(kv))`, then `x += MLP(LN(x))`.
pub fn cstl<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    kv: Var,
    win: Windows,
    heads: usize,
) -> Result<Var> {
    let xq = layers::norm(g, p, &format!("{name}.norm_q"), x)?;
    let xkv = layers::norm(g, p, &format!("{name}.norm_kv"), kv)?;
    let (a, _) = window_attention(g, p, name, xq, xkv, win, heads)?;
    let x = g.add(x, a)?;
    let h = layers::norm(g, p, &format!("{name}.norm_mlp"), x)?;
    let h = layers::linear(g, p, &format!("{name}.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = layers::linear(g, p, &format!("{name}.fc2"), h)?;
    Ok(g.add(x, h)?)
}

fn to_tokens<T: Element>(g: &mut Graph<T>, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec();
    let t = g.reshape(map, &[s[1], s[2] * s[3]])?;
    Ok(g.permute(t, &[1, 0])?)
}

fn to_map<T: Element>(g: &mut Graph<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let e = g.shape(tokens)[1];
    let t = g.permute(tokens, &[1, 0])?;
    Ok(g.reshape(t, &[1, e, h, w])?)
}

/// Refines the neighbor map `b_nbr` by attending to the current map `b_cur`.
/// Both are `[1, C, h, w]`; the result has the same shape.
pub fn cswt_forward<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &CswtConfig,
    b_cur: Var,
    b_nbr: Var,
) -> Result<Var> {
    let shape = g.shape(b_nbr).to_vec();
    if g.shape(b_cur) != shape.as_slice() || shape.len() != 4 || shape[0] != 1 {
        return Err(crate::CoreError::Data(format!(
            "cswt expects two equal [1, C, h, w] maps, got {shape:?} and {:?}",
            g.shape(b_cur)
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    let project = shape[1] != cfg.embed_dim;
    let (cur, nbr) = if project {
        (layers::conv(g, p, "cswt.in", b_cur, 1)?, layers::conv(g, p, "cswt.in", b_nbr, 1)?)
    } else {
        (b_cur, b_nbr)
    };
    let kv = to_tokens(g, cur)?;
    let mut x = to_tokens(g, nbr)?;
    for b in 0..cfg.n_castb {
        let block_in = x;
        for l in 0..cfg.n_cstl_per_block {
            let shift = if l % 2 == 1 { cfg.shift() } else { 0 };
            let win = Windows { h, w, window: cfg.window, shift };
            x = cstl(g, p, &cfg.layer_name(b, l), x, kv, win, cfg.heads)?;
        }
        let map = to_map(g, x, h, w)?;
        let map = layers::conv(g, p, &format!("cswt.block{b}.conv"), map, 1)?;
        let t = to_tokens(g, map)?;
        x = g.add(block_in, t)?;
    }
    let out = to_map(g, x, h, w)?;
    if project {
        layers::conv(g, p, "cswt.out", out, 1)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Rng64;
    use rand::SeedableRng;

    fn cfg(e: usize) -> CswtConfig {
        CswtConfig { n_castb: 2, n_cstl_per_block: 2, heads: 2, window: 4, embed_dim: e, mlp_ratio: 2.0 }
    }

    fn random_map(rng: &mut Rng64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(cfg(8).validate().is_ok());
        assert!(CswtConfig { n_cstl_per_block: 3, ..cfg(8) }.validate().is_err());
        assert!(CswtConfig { heads: 3, ..cfg(8) }.validate().is_err());
    }

    #[test]
    fn partition_covers_every_padded_position_once() {
        for shift in [0, 4] {
            let win = Windows { h: 20, w: 12, window: 8, shift };
            let (hp, wp) = win.padded();
            assert_eq!((hp, wp), (24, 16));
            // padded positions are zeros, so tag real positions with id + 1
            let ids: Vec<f64> = (0..20 * 12).map(|i| (i + 1) as f64).collect();
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_f64(&[240, 1], &ids).unwrap());
            let parts = partition(&mut g, x, win, 1).unwrap();
            assert_eq!(g.shape(parts), &[win.count(), 64, 1]);
            let mut counts = vec![0usize; 241];
            for &v in g.value(parts).data() {
                counts[v as usize] += 1;
            }
            assert_eq!(counts[0], hp * wp - 240);
            assert!(counts[1..].iter().all(|&c| c == 1));
            let back = merge(&mut g, parts, win, 1).unwrap();
            assert_eq!(g.value(back), g.value(x));
        }
    }

    #[test]
    fn shifted_labels_follow_bands() {
        let win = Windows { h: 8, w: 8, window: 4, shift: 2 };
        let labels = win.labels();
        assert_eq!(labels[0], 0);
        assert_eq!(labels[4 * 8 + 4], 2 * (3 + 1));
        assert_eq!(labels[7 * 8 + 7], 2 * (2 * 3 + 2));
        assert!(Windows { shift: 0, ..win }.mask().is_none());
    }

    #[test]
    fn attention_rows_normalized_and_shift_mask_enforced() {
        let mut rng = Rng64::seed_from_u64(9);
        let c = cfg(8);
        let mut store = ParamStore::new();
        init(&mut store, &mut rng, &c, 8);
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        for (h, w, shift) in [(8, 8, 0), (8, 8, 2), (6, 10, 2), (5, 5, 0)] {
            let win = Windows { h, w, window: 4, shift };
            let xq = g.constant(random_map(&mut rng, &[h * w, 8]));
            let xkv = g.constant(random_map(&mut rng, &[h * w, 8]));
            let (out, attn) = window_attention(&mut g, &p, "cswt.block0.layer0", xq, xkv, win, 2).unwrap();
            assert_eq!(g.shape(out), &[h * w, 8]);
            let a = g.value(attn);
            for row in a.data().chunks(16) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            let labels = win.labels();
            let (_, wp) = win.padded();
            let wx_count = wp / 4;
            for wi in 0..win.count() {
                let pos = |t: usize| ((wi / wx_count) * 4 + t / 4) * wp + (wi % wx_count) * 4 + t % 4;
                for head in 0..2 {
                    for i in 0..16 {
                        for j in 0..16 {
                            if labels[pos(i)] != labels[pos(j)] {
                                assert!(a.at(&[wi, head, i, j]) < 1e-6);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_shape_matches_input_with_padding() {
        let mut rng = Rng64::seed_from_u64(2);
        let c = CswtConfig { window: 8, ..cfg(8) };
        let mut store = ParamStore::new();
        init(&mut store, &mut rng, &c, 8);
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        let a = g.constant(random_map(&mut rng, &[1, 8, 20, 20]));
        let b = g.constant(random_map(&mut rng, &[1, 8, 20, 20]));
        let y = cswt_forward(&mut g, &p, &c, a, b).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 20, 20]);
    }

    #[test]
    fn projected_embedding_keeps_shape() {
        let mut rng = Rng64::seed_from_u64(3);
        let c = cfg(6);
        let mut store = ParamStore::new();
        init(&mut store, &mut rng, &c, 4);
        assert!(store.contains("cswt.in.w"));
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        let a = g.constant(random_map(&mut rng, &[1, 4, 4, 8]));
        let b = g.constant(random_map(&mut rng, &[1, 4, 4, 8]));
        let y = cswt_forward(&mut g, &p, &c, a, b).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 8]);
    }

    #[test]
    fn zeroed_value_mlp_and_block_conv_pass_query_through() {
        let mut rng = Rng64::seed_from_u64(4);
        let c = cfg(8);
        let mut store = ParamStore::new();
        init(&mut store, &mut rng, &c, 8);
        for b in 0..2 {
            layers::zero_prefix(&mut store, &format!("cswt.block{b}.conv"));
            for l in 0..2 {
                layers::zero_prefix(&mut store, &format!("cswt.block{b}.layer{l}.vproj"));
                layers::zero_prefix(&mut store, &format!("cswt.block{b}.layer{l}.fc2"));
            }
        }
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        let cur = g.constant(random_map(&mut rng, &[1, 8, 6, 6]));
        let nbr = g.constant(random_map(&mut rng, &[1, 8, 6, 6]));
        let y = cswt_forward(&mut g, &p, &c, cur, nbr).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(nbr)) < 1e-6);
    }
}
