use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

/// Row-major `[m, k] x [k, n]` into a fresh buffer.
pub(crate) fn matmul_into<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), T::zero(), &mut c, (n as isize, 1));
    c
}

/// Gradients of `C = A B` for one `[m, k] x [k, n]` product.
fn matmul_grads<T: Element>(
    a: &[T],
    b: &[T],
    dc: &[T],
    (m, k, n): (usize, usize, usize),
    da: &mut [T],
    db: &mut [T],
) {
    let (ki, ni) = (k as isize, n as isize);
    // dA = dC B^T
    T::gemm(m, n, k, dc, (ni, 1), b, (1, ni), T::one(), da, (ki, 1));
    // dB = A^T dC
    T::gemm(k, m, n, a, (1, ki), dc, (ni, 1), T::one(), db, (ni, 1));
}

impl<T: Element> Graph<T> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = matmul_into(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], c)?, Op::MatMul { a, b }, "matmul")
    }

    /// Batched `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err(format!("bmm {sa:?} x {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut c = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &db[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut c[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        self.push(Tensor::new(&[bs, m, n], c)?, Op::Bmm { a, b }, "bmm")
    }
}

pub(crate) fn matmul_vjp<T: Element>(g: &Graph<T>, a: Var, b: Var, grad: &[T], batched: bool) -> Vec<(Var, Vec<T>)> {
    let (va, vb) = (g.value(a), g.value(b));
    let (bs, m, k, n) = if batched {
        (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2])
    } else {
        (1, va.shape()[0], va.shape()[1], vb.shape()[1])
    };
    let mut ga = vec![T::zero(); va.numel()];
    let mut gb = vec![T::zero(); vb.numel()];
    for i in 0..bs {
        matmul_grads(
            &va.data()[i * m * k..(i + 1) * m * k],
            &vb.data()[i * k * n..(i + 1) * k * n],
            &grad[i * m * n..(i + 1) * m * n],
            (m, k, n),
            &mut ga[i * m * k..(i + 1) * m * k],
            &mut gb[i * k * n..(i + 1) * k * n],
        );
    }
    vec![(a, ga), (b, gb)]
}
