//! Finite-difference checks of every engine op and of the restorer's L1 loss,
//! shared by the `gradcheck` command.

use nsf_tensor::{grad_check, grad_check_sampled, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::hybformer::{forward, l1_loss, CswtConfig, HybConfig, HybFormer, Variant};
use crate::layers::Rng64;

pub const OP_STEP: f64 = 1e-4;
/// A larger step can cross a patch-argmax switch in global matching.
pub const MODEL_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng64::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive shape")
}

/// Weighted sum, so each output element sees a different upstream gradient.
fn probe(g: &mut Graph<f64>, y: Var) -> nsf_tensor::Result<Var> {
    let w = g.constant(rand_tensor(g.shape(y), 0x5eed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub type OpFn = fn(&mut Graph<f64>, &[Var]) -> nsf_tensor::Result<Var>;

/// `(name, input shapes, scalar-valued function)` for every differentiable op.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let a = vec![2, 3, 4];
    vec![
        ("add", vec![a.clone(), a.clone()], |g, v| { let y = g.add(v[0], v[1])?; probe(g, y) }),
        ("sub", vec![a.clone(), vec![3, 1]], |g, v| { let y = g.sub(v[0], v[1])?; probe(g, y) }),
        ("mul", vec![a.clone(), vec![3, 1]], |g, v| { let y = g.mul(v[0], v[1])?; probe(g, y) }),
        ("sigmoid", vec![a.clone()], |g, v| { let y = g.sigmoid(v[0])?; probe(g, y) }),
        ("tanh", vec![a.clone()], |g, v| { let y = g.tanh(v[0])?; probe(g, y) }),
        ("gelu", vec![a.clone()], |g, v| { let y = g.gelu(v[0])?; probe(g, y) }),
        ("exp", vec![a.clone()], |g, v| { let y = g.exp(v[0])?; probe(g, y) }),
        ("log", vec![a.clone()], |g, v| { let e = g.exp(v[0])?; let y = g.log(e)?; let y = g.mul(y, y)?; probe(g, y) }),
        ("abs", vec![a.clone()], |g, v| { let y = g.abs(v[0])?; probe(g, y) }),
        ("affine", vec![a.clone()], |g, v| { let y = g.affine(v[0], -1.5, 0.2)?; probe(g, y) }),
        ("scale", vec![a.clone()], |g, v| { let y = g.scale(v[0], 3.0)?; probe(g, y) }),
        ("clamp", vec![a.clone()], |g, v| { let y = g.clamp(v[0], -0.55, 0.61)?; probe(g, y) }),
        ("reshape", vec![a.clone()], |g, v| { let y = g.reshape(v[0], &[6, 4])?; probe(g, y) }),
        ("permute", vec![a.clone()], |g, v| { let y = g.permute(v[0], &[2, 0, 1])?; probe(g, y) }),
        ("narrow", vec![a.clone()], |g, v| { let y = g.narrow(v[0], 2, 1, 2)?; probe(g, y) }),
        ("pad", vec![a.clone()], |g, v| { let y = g.pad(v[0], 1, 1, 2)?; probe(g, y) }),
        ("roll", vec![a.clone()], |g, v| { let y = g.roll(v[0], 2, -3)?; probe(g, y) }),
        ("concat", vec![a.clone(), a.clone()], |g, v| { let y = g.concat(&[v[0], v[1]], 1)?; probe(g, y) }),
        ("concat_channels", vec![vec![1, 2, 3, 3], vec![1, 1, 3, 3]], |g, v| { let y = g.concat_channels(&[v[0], v[1]])?; probe(g, y) }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y) }),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 5]], |g, v| { let y = g.bmm(v[0], v[1])?; probe(g, y) }),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, false)?; probe(g, y) }),
        ("conv2d stride 2", vec![vec![1, 2, 6, 6], vec![3, 2, 3, 3], vec![3]], |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1, false)?; probe(g, y) }),
        ("conv2d transposed", vec![vec![1, 3, 3, 3], vec![2, 3, 2, 2], vec![2]], |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 0, true)?; probe(g, y) }),
        ("softmax", vec![vec![3, 5]], |g, v| { let y = g.softmax(v[0], 1)?; probe(g, y) }),
        ("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; probe(g, y) }),
        ("sum", vec![a.clone()], |g, v| { let s = g.sum(v[0])?; g.mul(s, s) }),
        ("mean", vec![a.clone()], |g, v| { let s = g.mean(v[0])?; g.mul(s, s) }),
        ("sum_axis", vec![a.clone()], |g, v| { let y = g.sum_axis(v[0], 1)?; probe(g, y) }),
        ("mean_axis", vec![a.clone()], |g, v| { let y = g.mean_axis(v[0], 2)?; probe(g, y) }),
        ("gather_rows", vec![vec![5, 3]], |g, v| { let y = g.gather_rows(v[0], &[4, 0, 0, 2])?; probe(g, y) }),
        ("normalize_rows", vec![vec![4, 5]], |g, v| { let y = g.normalize_rows(v[0], 1e-8)?; probe(g, y) }),
        ("match_max", vec![vec![6, 4], vec![5, 4]], |g, v| { let (m, _) = g.match_max(v[0], v[1])?; probe(g, m) }),
        ("unfold", vec![vec![1, 2, 6, 6]], |g, v| { let y = g.unfold(v[0], 3, 1, 1)?; probe(g, y) }),
        ("fold", vec![vec![9, 72]], |g, v| { let y = g.fold(v[0], 12, 12, 6, 2, 4)?; probe(g, y) }),
        ("resize_bilinear", vec![vec![1, 2, 3, 4]], |g, v| { let y = g.resize_bilinear(v[0], 2)?; probe(g, y) }),
    ]
}

/// Deterministic uniform `[-1, 1)` input for case `case`, input `input`.
pub fn op_input(shape: &[usize], case: usize, input: usize) -> Tensor<f64> {
    rand_tensor(shape, (case * 10 + input) as u64)
}

/// One case per differentiable op at step [`OP_STEP`].
pub fn op_suite() -> Result<Vec<GradCase>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| {
            let inputs: Vec<_> = shapes.iter().enumerate().map(|(j, s)| op_input(s, i, j)).collect();
            Ok(GradCase { name: name.to_string(), max_rel_error: grad_check(f, &inputs, OP_STEP)? })
        })
        .collect()
}

/// Restorer configuration used for the end-to-end check: 16×16, C = 4, 1 CASTB × 2 CSTL.
pub fn tiny_model_config(variant: Variant) -> HybConfig {
    HybConfig {
        channels: 4,
        cswt: CswtConfig { n_castb: 1, n_cstl_per_block: 2, heads: 2, window: 8, embed_dim: 16, mlp_ratio: 2.0 },
        variant,
        events: false,
    }
}

/// L1 loss of the full restorer w.r.t. every parameter tensor, probing
/// `per_tensor` entries of each.
pub fn end_to_end(per_tensor: usize, seed: u64) -> Result<GradCase> {
    let model = HybFormer::new(tiny_model_config(Variant::Full), seed)?;
    let store = model.params.cast::<f64>();
    let mut rng = Rng64::seed_from_u64(seed);
    let frames = Tensor::new(&[5, 3, 16, 16], (0..5 * 3 * 256).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let gt = Tensor::new(&[1, 3, 16, 16], (0..3 * 256).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let cfg = model.cfg.clone();
    let err = grad_check_sampled(
        |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let p = store.bind_existing(v);
            let x = g.constant(frames.clone());
            let t = g.constant(gt.clone());
            let out = forward(g, &p, &cfg, x, None)?;
            l1_loss(g, out.image, t)
        },
        &store.tensors(),
        MODEL_STEP,
        per_tensor,
    )?;
    Ok(GradCase { name: format!("restorer L1 ({} tensors)", store.len()), max_rel_error: err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_suite().unwrap() {
            assert!(c.passed(), "{}: {:e}", c.name, c.max_rel_error);
        }
    }
}
