use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::graph::{BinaryKind, Graph, Op, UnaryKind, Var};
use crate::tensor::{strides_of, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Right-aligned broadcasting of two shapes.
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (a, b) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for d in 0..rank {
            out.push(match (a[d], b[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
            });
        }
        let bstr = |s: &[usize]| {
            let st = strides_of(s);
            s.iter().zip(st).map(|(&n, st)| if n == 1 { 0 } else { st }).collect()
        };
        Ok(Self { a_strides: bstr(&a), b_strides: bstr(&b), out })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.out.len();
        let last = self.out[nd - 1];
        let (sa, sb) = (self.a_strides[nd - 1], self.b_strides[nd - 1]);
        let mut idx = vec![0usize; nd];
        let (mut ia, mut ib, mut o) = (0usize, 0usize, 0usize);
        loop {
            for j in 0..last {
                f(o, ia + j * sa, ib + j * sb);
                o += 1;
            }
            let mut d = nd - 1;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ia -= self.a_strides[d] * self.out[d];
                ib -= self.b_strides[d] * self.out[d];
                idx[d] = 0;
            }
        }
    }
}

fn gelu<T: Element>(x: T) -> T {
    let xf = x.as_f64();
    let t = (GELU_C * (xf + GELU_A * xf * xf * xf)).tanh();
    T::of(0.5 * xf * (1.0 + t))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid<T: Element>(x: T) -> T {
    let xf = x.as_f64();
    let s = if xf >= 0.0 { 1.0 / (1.0 + (-xf).exp()) } else { xf.exp() / (1.0 + xf.exp()) };
    T::of(s)
}

impl<T: Element> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            let it = va.data().iter().zip(vb.data());
            match kind {
                BinaryKind::Add => it.map(|(&x, &y)| x + y).collect(),
                BinaryKind::Sub => it.map(|(&x, &y)| x - y).collect(),
                BinaryKind::Mul => it.map(|(&x, &y)| x * y).collect(),
            }
        } else {
            let bc = Broadcast::new(va.shape(), vb.shape())?;
            let mut out = vec![T::zero(); bc.out.iter().product()];
            let (da, db) = (va.data(), vb.data());
            bc.for_each(|o, i, j| {
                out[o] = match kind {
                    BinaryKind::Add => da[i] + db[j],
                    BinaryKind::Sub => da[i] - db[j],
                    BinaryKind::Mul => da[i] * db[j],
                }
            });
            return self.push(Tensor::new(&bc.out, out)?, Op::Binary { kind, a, b }, "broadcast");
        };
        let shape = va.shape().to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Binary { kind, a, b }, "elementwise")
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = match kind {
            UnaryKind::Sigmoid => v.map(sigmoid),
            UnaryKind::Tanh => v.map(|a| a.tanh()),
            UnaryKind::Gelu => v.map(gelu),
            UnaryKind::Exp => v.map(|a| a.exp()),
            UnaryKind::Log => v.map(|a| a.ln()),
            UnaryKind::Abs => v.map(|a| a.abs()),
        };
        self.push(out, Op::Unary { kind, x }, &format!("{kind:?}").to_lowercase())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    /// `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let (m, a) = (T::of(mul), T::of(add));
        let out = self.value(x).map(|v| v * m + a);
        self.push(out, Op::Affine { x, mul }, "affine")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (T::of(lo), T::of(hi));
        let out = self.value(x).map(|v| v.max(l).min(h));
        self.push(out, Op::Clamp { x, lo, hi }, "clamp")
    }
}

fn reduce_to<T: Element>(grad: &[T], bc: &Broadcast, target_len: usize, target_is_a: bool) -> Vec<T> {
    let mut out = vec![T::zero(); target_len];
    bc.for_each(|o, i, j| out[if target_is_a { i } else { j }] += grad[o]);
    out
}

pub(crate) fn binary_vjp<T: Element>(
    g: &Graph<T>,
    kind: BinaryKind,
    a: Var,
    b: Var,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (va, vb) = (g.value(a), g.value(b));
    let mut out = Vec::with_capacity(2);
    if va.shape() == vb.shape() {
        let (da, db) = (va.data(), vb.data());
        match kind {
            BinaryKind::Add => {
                out.push((a, grad.to_vec()));
                out.push((b, grad.to_vec()));
            }
            BinaryKind::Sub => {
                out.push((a, grad.to_vec()));
                out.push((b, grad.iter().map(|&v| -v).collect()));
            }
            BinaryKind::Mul => {
                out.push((a, grad.iter().zip(db).map(|(&g, &y)| g * y).collect()));
                out.push((b, grad.iter().zip(da).map(|(&g, &x)| g * x).collect()));
            }
        }
        return out;
    }
    let bc = Broadcast::new(va.shape(), vb.shape()).expect("validated in forward");
    match kind {
        BinaryKind::Add | BinaryKind::Sub => {
            out.push((a, reduce_to(grad, &bc, va.numel(), true)));
            let mut gb = reduce_to(grad, &bc, vb.numel(), false);
            if kind == BinaryKind::Sub {
                gb.iter_mut().for_each(|v| *v = -*v);
            }
            out.push((b, gb));
        }
        BinaryKind::Mul => {
            let (da, db) = (va.data(), vb.data());
            let mut ga = vec![T::zero(); va.numel()];
            let mut gb = vec![T::zero(); vb.numel()];
            bc.for_each(|o, i, j| {
                ga[i] += grad[o] * db[j];
                gb[j] += grad[o] * da[i];
            });
            out.push((a, ga));
            out.push((b, gb));
        }
    }
    out
}

pub(crate) fn unary_vjp<T: Element>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    kind: UnaryKind,
    grad: &[T],
) -> Vec<T> {
    let (xd, yd) = (x.data(), y.data());
    let one = T::one();
    grad.iter()
        .enumerate()
        .map(|(i, &g)| match kind {
            UnaryKind::Sigmoid => g * yd[i] * (one - yd[i]),
            UnaryKind::Tanh => g * (one - yd[i] * yd[i]),
            UnaryKind::Gelu => g * T::of(gelu_grad(xd[i].as_f64())),
            UnaryKind::Exp => g * yd[i],
            UnaryKind::Log => g / xd[i],
            UnaryKind::Abs => {
                if xd[i] > T::zero() {
                    g
                } else if xd[i] < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }
        })
        .collect()
}

pub(crate) fn clamp_vjp<T: Element>(x: &Tensor<T>, lo: f64, hi: f64, grad: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(grad)
        .map(|(&v, &g)| {
            let v = v.as_f64();
            if v < lo || v > hi {
                T::zero()
            } else {
                g
            }
        })
        .collect()
}
