use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{split_at_axis, strides_of, Tensor};

/// Gathers `src` (shape `shape`) into the axis order `perm`.
pub(crate) fn permute_data<T: Element>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let last = out_shape[nd - 1];
    let last_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..last {
            out.push(src[base + j * last_stride]);
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for {shape:?}"));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape { x }, "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != v.ndim() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return shape_err(format!("invalid permutation {perm:?} for {:?}", v.shape()));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let data = permute_data(v.data(), v.shape(), perm);
        self.push(Tensor::new(&shape, data)?, Op::Permute { x, perm: perm.to_vec() }, "permute")
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        if len == 0 || start + len > v.shape()[axis] {
            return shape_err(format!("narrow {start}+{len} exceeds axis {axis} of {:?}", v.shape()));
        }
        let (outer, n, inner) = split_at_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::new(&shape, data)?, Op::Narrow { x, axis, start }, "narrow")
    }

    /// Zero-pads `axis` with `before` and `after` entries.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(v.shape(), axis);
        let m = n + before + after;
        let mut data = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            data[dst..dst + n * inner].copy_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = m;
        self.push(Tensor::new(&shape, data)?, Op::Pad { x, axis, before }, "pad")
    }

    /// Cyclic shift along `axis`: `out[i] = x[(i - shift) mod n]`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let data = roll_data(v.data(), v.shape(), axis, shift);
        let shape = v.shape().to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Roll { x, axis, shift }, "roll")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat along {axis}: {s:?} vs {base:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::new(&shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, "concat")
    }

    /// Concatenation along the channel axis of `[N, C, H, W]` maps.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.iter().any(|&v| self.shape(v).len() != 4) {
            return shape_err("concat_channels expects 4-d tensors");
        }
        self.concat(inputs, 1)
    }
}

pub(crate) fn roll_data<T: Element>(src: &[T], shape: &[usize], axis: usize, shift: isize) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(shape, axis);
    let s = shift.rem_euclid(n as isize) as usize;
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..n {
            let j = (i + n - s) % n;
            let dst = (o * n + i) * inner;
            let srcb = (o * n + j) * inner;
            out[dst..dst + inner].copy_from_slice(&src[srcb..srcb + inner]);
        }
    }
    out
}

pub(crate) fn narrow_vjp<T: Element>(x: &Tensor<T>, axis: usize, start: usize, grad: &[T]) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let len = grad.len() / (outer * inner);
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        let dst = (o * n + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&grad[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

pub(crate) fn pad_vjp<T: Element>(x: &Tensor<T>, axis: usize, before: usize, grad: &[T]) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let m = grad.len() / (outer * inner);
    let mut out = Vec::with_capacity(x.numel());
    for o in 0..outer {
        let src = (o * m + before) * inner;
        out.extend_from_slice(&grad[src..src + n * inner]);
    }
    out
}

pub(crate) fn concat_vjp<T: Element>(
    g: &Graph<T>,
    inputs: &[Var],
    axis: usize,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let base = g.shape(inputs[0]);
    let (outer, _, inner) = split_at_axis(base, axis);
    let total: usize = inputs.iter().map(|&v| g.shape(v)[axis]).sum();
    let mut offset = 0;
    inputs
        .iter()
        .map(|&v| {
            let n = g.shape(v)[axis];
            let mut out = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                out.extend_from_slice(&grad[src..src + n * inner]);
            }
            offset += n;
            (v, out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_channels_shape() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[1, 5, 4, 4]);
    }

    #[test]
    fn permute_transposes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_f64(&[2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap());
        let t = g.permute(a, &[1, 0]).unwrap();
        assert_eq!(g.value(t).data(), &[0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn roll_then_unroll_is_identity() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let shape = [2, 3, 4];
        let r = roll_data(&data, &shape, 2, -3);
        assert_eq!(roll_data(&r, &shape, 2, 3), data);
        assert_eq!(roll_data(&data[..5], &[5], 0, 2), vec![3., 4., 0., 1., 2.]);
    }

    #[test]
    fn pad_and_narrow_round_trip() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let p = g.pad(a, 2, 0, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 2, 5, 3]);
        let c = g.narrow(p, 2, 0, 3).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }
}
