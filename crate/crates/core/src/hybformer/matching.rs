//! Patch-level global matching against a sharp frame and transfer of the matched
//! patches at all three feature scales.

use nsf_tensor::{BoundParams, Element, Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::layers;

pub const NORM_FLOOR: f64 = 1e-8;

/// Unfold parameters `(kernel, pad, stride)` per scale (1 = full resolution, 3 = quarter).
/// All three yield the same patch count on the corresponding feature maps.
pub fn unfold_params(scale: usize) -> Result<(usize, usize, usize)> {
    match scale {
        3 => Ok((3, 1, 1)),
        2 => Ok((6, 2, 2)),
        1 => Ok((12, 4, 4)),
        other => Err(CoreError::Config(format!("scale must be 1, 2 or 3, got {other}"))),
    }
}

/// Best source patch per target patch and its similarity.
#[derive(Clone, Debug)]
pub struct MatchResult {
    /// Source patch index for each target patch, raster order.
    pub index: Vec<usize>,
    /// `[1, 1, h/4, w/4]` row maxima of the cosine similarity.
    pub confidence: Var,
}

/// Matches every 3x3 patch of `f` against all 3x3 patches of `g3` by cosine similarity.
pub fn global_match<T: Element>(g: &mut Graph<T>, f: Var, g3: Var) -> Result<MatchResult> {
    let shape = g.shape(f).to_vec();
    if g.shape(g3) != shape.as_slice() || shape.len() != 4 || shape[0] != 1 {
        return Err(CoreError::Data(format!("global_match expects equal [1, C, h, w] maps, got {shape:?} and {:?}", g.shape(g3))));
    }
    let (k, pad, stride) = unfold_params(3)?;
    let q = g.unfold(f, k, pad, stride)?;
    let q = g.normalize_rows(q, NORM_FLOOR)?;
    let kk = g.unfold(g3, k, pad, stride)?;
    let kk = g.normalize_rows(kk, NORM_FLOOR)?;
    let (m, index) = g.match_max(q, kk)?;
    let confidence = g.reshape(m, &[1, 1, shape[2], shape[3]])?;
    Ok(MatchResult { index, confidence })
}

/// Rebuilds `gs` (scale `scale`) with patch `i` replaced by source patch `index[i]`.
pub fn fold_by_index<T: Element>(g: &mut Graph<T>, gs: Var, index: &[usize], scale: usize) -> Result<Var> {
    let (k, pad, stride) = unfold_params(scale)?;
    let shape = g.shape(gs).to_vec();
    let patches = g.unfold(gs, k, pad, stride)?;
    let rows = g.shape(patches)[0];
    if rows != index.len() {
        return Err(CoreError::Tensor(nsf_tensor::TensorError::Contract(format!(
            "scale {scale} map {:?} has {rows} patches but the index has {}",
            &shape[2..],
            index.len()
        ))));
    }
    let picked = g.gather_rows(patches, index)?;
    Ok(g.fold(picked, shape[2], shape[3], k, pad, stride)?)
}

/// `conv⁺(cat(g⁺', x)) ⊙ m⁺ + conv⁻(cat(g⁻', x)) ⊙ m⁻ + x`; confidence maps are
/// `[1, 1, h, w]` at `x`'s resolution and broadcast over channels.
#[allow(clippy::too_many_arguments)]
pub fn aggregate<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    g_plus: Var,
    g_minus: Var,
    m_plus: Var,
    m_minus: Var,
) -> Result<Var> {
    let cp = g.concat_channels(&[g_plus, x])?;
    let cp = layers::conv(g, p, &format!("{name}.plus.conv"), cp, 1)?;
    let cp = g.mul(cp, m_plus)?;
    let cm = g.concat_channels(&[g_minus, x])?;
    let cm = layers::conv(g, p, &format!("{name}.minus.conv"), cm, 1)?;
    let cm = g.mul(cm, m_minus)?;
    let s = g.add(cp, cm)?;
    Ok(g.add(s, x)?)
}

/// Confidence map resized to the given scale.
pub fn confidence_at<T: Element>(g: &mut Graph<T>, m: Var, scale: usize) -> Result<Var> {
    match scale {
        3 => Ok(m),
        2 => Ok(g.resize_bilinear(m, 2)?),
        1 => Ok(g.resize_bilinear(m, 4)?),
        other => Err(CoreError::Config(format!("scale must be 1, 2 or 3, got {other}"))),
    }
}

/// Exhaustive cosine-similarity matching on raw `[L, D]` patch rows; used as a reference.
pub fn brute_force_match(q: &Tensor<f64>, k: &Tensor<f64>) -> (Vec<usize>, Vec<f64>) {
    let d = q.shape()[1];
    let unit = |row: &[f64]| {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter().map(|v| v / n).collect::<Vec<_>>()
    };
    let ks: Vec<Vec<f64>> = k.data().chunks(d).map(unit).collect();
    let mut index = Vec::new();
    let mut best = Vec::new();
    for row in q.data().chunks(d) {
        let qn = unit(row);
        let mut arg = 0;
        let mut top = f64::NEG_INFINITY;
        for (j, kr) in ks.iter().enumerate() {
            let s: f64 = qn.iter().zip(kr).map(|(a, b)| a * b).sum();
            if s > top {
                top = s;
                arg = j;
            }
        }
        index.push(arg);
        best.push(top);
    }
    (index, best)
}
