mod conv;
mod linalg;
mod nn;
mod patches;
mod pointwise;
mod shape;

use crate::element::Element;
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

pub(crate) use conv::{col2im, im2col};
pub(crate) use patches::coverage_counts;

/// Vector-Jacobian product of one recorded op: the gradient contribution for each input.
pub(crate) fn vjp<T: Element>(g: &Graph<T>, op: &Op, out: &Tensor<T>, grad: &[T]) -> Vec<(Var, Vec<T>)> {
    match op {
        Op::Leaf => vec![],
        Op::Binary { kind, a, b } => pointwise::binary_vjp(g, *kind, *a, *b, grad),
        Op::Unary { kind, x } => vec![(*x, pointwise::unary_vjp(g.value(*x), out, *kind, grad))],
        Op::Affine { x, mul } => {
            let m = T::of(*mul);
            vec![(*x, grad.iter().map(|&v| v * m).collect())]
        }
        Op::Clamp { x, lo, hi } => vec![(*x, pointwise::clamp_vjp(g.value(*x), *lo, *hi, grad))],
        Op::Concat { inputs, axis } => shape::concat_vjp(g, inputs, *axis, grad),
        Op::Reshape { x } => vec![(*x, grad.to_vec())],
        Op::Permute { x, perm } => {
            let inv = shape::inverse_perm(perm);
            vec![(*x, shape::permute_data(grad, out.shape(), &inv))]
        }
        Op::Narrow { x, axis, start } => vec![(*x, shape::narrow_vjp(g.value(*x), *axis, *start, grad))],
        Op::Pad { x, axis, before } => vec![(*x, shape::pad_vjp(g.value(*x), *axis, *before, grad))],
        Op::Roll { x, axis, shift } => vec![(*x, shape::roll_data(grad, out.shape(), *axis, -*shift))],
        Op::MatMul { a, b } => linalg::matmul_vjp(g, *a, *b, grad, false),
        Op::Bmm { a, b } => linalg::matmul_vjp(g, *a, *b, grad, true),
        Op::Conv2d { x, w, b, stride, pad, transposed } => {
            conv::conv2d_vjp(g, (*x, *w, *b), *stride, *pad, *transposed, grad)
        }
        Op::Softmax { x, axis } => vec![(*x, nn::softmax_vjp(out, *axis, grad))],
        Op::LayerNorm { x, gamma, beta, stats } => nn::layer_norm_vjp(g, (*x, *gamma, *beta), stats, grad),
        Op::Unfold { x, geom } => vec![(*x, patches::unfold_vjp(geom, grad))],
        Op::Fold { x, geom, counts } => vec![(*x, patches::fold_vjp(geom, counts, grad))],
        Op::Resize { x, factor } => vec![(*x, patches::resize_vjp(g.value(*x), *factor, grad))],
        Op::Sum { x } => vec![(*x, vec![grad[0]; g.value(*x).numel()])],
        Op::SumAxis { x, axis } => vec![(*x, nn::sum_axis_vjp(g.value(*x), *axis, grad))],
        Op::GatherRows { x, index } => vec![(*x, nn::gather_rows_vjp(g.value(*x), index, grad))],
        Op::NormalizeRows { x, floor, norms } => vec![(*x, nn::normalize_rows_vjp(out, *floor, norms, grad))],
        Op::MatchMax { q, k, index } => nn::match_max_vjp(g, *q, *k, index, grad),
    }
}
