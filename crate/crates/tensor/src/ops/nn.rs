use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{split_at_axis, Tensor};

impl<T: Element> Graph<T> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() {
            return shape_err(format!("softmax axis {axis} out of range for {:?}", v.shape()));
        }
        let (outer, n, inner) = split_at_axis(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        let mut buf = vec![0f64; n];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = (src[at(j)].as_f64() - max).exp();
                    total += *b;
                }
                for (j, b) in buf.iter().enumerate() {
                    out[at(j)] = T::of(b / total);
                }
            }
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, "softmax")
    }

    /// Normalizes each vector along the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let d = *v.shape().last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!("layer_norm affine params must be [{d}]"));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(v.numel());
        let mut stats = Vec::with_capacity(v.numel() / d);
        for row in v.data().chunks(d) {
            let mean = row.iter().map(|a| a.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, a) in row.iter().enumerate() {
                let xhat = (a.as_f64() - mean) * rstd;
                out.push(T::of(xhat) * gv[j] + bv[j]);
            }
            stats.push((mean, rstd));
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gamma, beta, stats }, "layer_norm")
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum_f64();
        self.push(Tensor::scalar(T::of(total)), Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis` (the axis is removed; a fully reduced result has shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() {
            return shape_err(format!("sum axis {axis} out of range for {:?}", v.shape()));
        }
        let (outer, n, inner) = split_at_axis(v.shape(), axis);
        let src = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| src[(o * n + j) * inner + i].as_f64()).sum();
                out.push(T::of(s));
            }
        }
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(&shape, out)?, Op::SumAxis { x, axis }, "sum_axis")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Selects rows of a `[R, D]` matrix; gradient scatter-adds into the source rows.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return shape_err(format!("gather_rows expects [R, D], got {:?}", v.shape()));
        }
        let (r, d) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return shape_err(format!("row index {bad} out of range for {r} rows"));
        }
        if index.is_empty() {
            return shape_err("gather_rows with empty index");
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(&[index.len(), d], out)?,
            Op::GatherRows { x, index: index.to_vec() },
            "gather_rows",
        )
    }

    /// L2-normalizes each row of a `[R, D]` matrix, dividing by `max(norm, floor)`.
    pub fn normalize_rows(&mut self, x: Var, floor: f64) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return shape_err(format!("normalize_rows expects [R, D], got {:?}", v.shape()));
        }
        let d = v.shape()[1];
        let mut out = Vec::with_capacity(v.numel());
        let mut norms = Vec::with_capacity(v.shape()[0]);
        for row in v.data().chunks(d) {
            let norm = row.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
            let denom = norm.max(floor);
            out.extend(row.iter().map(|&a| T::of(a.as_f64() / denom)));
            norms.push(norm);
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::NormalizeRows { x, floor, norms }, "normalize_rows")
    }

    /// For each row of `q` (`[L, D]`), finds the row of `k` (`[L2, D]`) with the largest
    /// inner product. Returns the maxima as a `[L]` tensor plus the argmax indices;
    /// ties resolve to the lowest index. The indices are not differentiated.
    pub fn match_max(&mut self, q: Var, k: Var) -> Result<(Var, Vec<usize>)> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return shape_err(format!("match_max expects [L, D] and [L2, D], got {sq:?}, {sk:?}"));
        }
        let (l, d, l2) = (sq[0], sq[1], sk[0]);
        let mut sim = vec![T::zero(); l * l2];
        T::gemm(
            l,
            d,
            l2,
            self.value(q).data(),
            (d as isize, 1),
            self.value(k).data(),
            (1, d as isize),
            T::zero(),
            &mut sim,
            (l2 as isize, 1),
        );
        let mut index = Vec::with_capacity(l);
        let mut best = Vec::with_capacity(l);
        for row in sim.chunks(l2) {
            let mut arg = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[arg] {
                    arg = j;
                }
            }
            index.push(arg);
            best.push(row[arg]);
        }
        let m = self.push(Tensor::new(&[l], best)?, Op::MatchMax { q, k, index: index.clone() }, "match_max")?;
        Ok((m, index))
    }
}

pub(crate) fn softmax_vjp<T: Element>(y: &Tensor<T>, axis: usize, grad: &[T]) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(y.shape(), axis);
    let yd = y.data();
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| grad[at(j)].as_f64() * yd[at(j)].as_f64()).sum();
            let dot = T::of(dot);
            for j in 0..n {
                out[at(j)] = yd[at(j)] * (grad[at(j)] - dot);
            }
        }
    }
    out
}

pub(crate) fn layer_norm_vjp<T: Element>(
    g: &Graph<T>,
    (x, gamma, beta): (Var, Var, Var),
    stats: &[(f64, f64)],
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let xv = g.value(x).data();
    let gv = g.value(gamma).data();
    let d = gv.len();
    let mut gx = Vec::with_capacity(xv.len());
    let mut gg = vec![0f64; d];
    let mut gb = vec![0f64; d];
    let mut dxhat = vec![0f64; d];
    let mut xhat = vec![0f64; d];
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let row = &xv[r * d..(r + 1) * d];
        let gr = &grad[r * d..(r + 1) * d];
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..d {
            xhat[j] = (row[j].as_f64() - mean) * rstd;
            let dy = gr[j].as_f64();
            dxhat[j] = dy * gv[j].as_f64();
            gg[j] += dy * xhat[j];
            gb[j] += dy;
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
        }
        let (m1, m2) = (m1 / d as f64, m2 / d as f64);
        gx.extend((0..d).map(|j| T::of(rstd * (dxhat[j] - m1 - xhat[j] * m2))));
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect();
    vec![(x, gx), (gamma, cast(gg)), (beta, cast(gb))]
}

pub(crate) fn sum_axis_vjp<T: Element>(x: &Tensor<T>, axis: usize, grad: &[T]) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for j in 0..n {
            let dst = (o * n + j) * inner;
            out[dst..dst + inner].copy_from_slice(&grad[o * inner..(o + 1) * inner]);
        }
    }
    out
}

pub(crate) fn gather_rows_vjp<T: Element>(x: &Tensor<T>, index: &[usize], grad: &[T]) -> Vec<T> {
    let d = x.shape()[1];
    let mut out = vec![T::zero(); x.numel()];
    for (r, &i) in index.iter().enumerate() {
        for j in 0..d {
            out[i * d + j] += grad[r * d + j];
        }
    }
    out
}

pub(crate) fn normalize_rows_vjp<T: Element>(y: &Tensor<T>, floor: f64, norms: &[f64], grad: &[T]) -> Vec<T> {
    let d = y.shape()[1];
    let yd = y.data();
    let mut out = Vec::with_capacity(yd.len());
    for (r, &norm) in norms.iter().enumerate() {
        let yr = &yd[r * d..(r + 1) * d];
        let gr = &grad[r * d..(r + 1) * d];
        if norm > floor {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            out.extend((0..d).map(|j| T::of((gr[j].as_f64() - yr[j].as_f64() * dot) / norm)));
        } else {
            out.extend(gr.iter().map(|&v| T::of(v.as_f64() / floor)));
        }
    }
    out
}

pub(crate) fn match_max_vjp<T: Element>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    index: &[usize],
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (qv, kv) = (g.value(q), g.value(k));
    let d = qv.shape()[1];
    let mut gq = vec![T::zero(); qv.numel()];
    let mut gk = vec![T::zero(); kv.numel()];
    for (i, &j) in index.iter().enumerate() {
        let dm = grad[i];
        for c in 0..d {
            gq[i * d + c] += dm * kv.data()[j * d + c];
            gk[j * d + c] += dm * qv.data()[i * d + c];
        }
    }
    vec![(q, gq), (k, gk)]
}
