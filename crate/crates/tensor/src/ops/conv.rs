//! Convolution through im2col / col2im and a GEMM.

use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, PatchGeometry, Var};
use crate::tensor::Tensor;

impl PatchGeometry {
    /// Number of patch positions along an extent `x`:
    /// `ceil((x + 2p - (k - 1)) / r)`.
    pub fn positions(&self, extent: usize) -> usize {
        let span = (extent + 2 * self.pad + 1) as isize - self.kernel as isize;
        if span <= 0 {
            0
        } else {
            (span as usize).div_ceil(self.stride)
        }
    }

    pub fn rows(&self) -> usize {
        self.positions(self.height)
    }

    pub fn cols(&self) -> usize {
        self.positions(self.width)
    }

    /// Total number of sliding patches `L`.
    pub fn patch_count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return shape_err("kernel and stride must be at least 1");
        }
        if self.kernel > self.height + 2 * self.pad || self.kernel > self.width + 2 * self.pad {
            return shape_err(format!(
                "window {} exceeds padded extent {}x{} (pad {})",
                self.kernel, self.height, self.width, self.pad
            ));
        }
        Ok(())
    }

    fn source(&self, pos: usize, offset: usize) -> isize {
        (pos * self.stride + offset) as isize - self.pad as isize
    }
}

/// `[C, H, W]` image to `[C*k*k, L]` columns; out-of-range taps read zero.
pub(crate) fn im2col<T: Element>(img: &[T], geom: &PatchGeometry) -> Vec<T> {
    let (oh, ow) = (geom.rows(), geom.cols());
    let (h, w, k) = (geom.height as isize, geom.width as isize, geom.kernel);
    let plane = geom.height * geom.width;
    let mut cols = vec![T::zero(); geom.patch_len() * oh * ow];
    for c in 0..geom.channels {
        let src = &img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for py in 0..oh {
                    let y = geom.source(py, ky);
                    if y < 0 || y >= h {
                        continue;
                    }
                    let line = &src[y as usize * geom.width..(y as usize + 1) * geom.width];
                    for px in 0..ow {
                        let x = geom.source(px, kx);
                        if x >= 0 && x < w {
                            dst[py * ow + px] = line[x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds `[C*k*k, L]` columns into `[C, H, W]`.
pub(crate) fn col2im<T: Element>(cols: &[T], geom: &PatchGeometry) -> Vec<T> {
    let (oh, ow) = (geom.rows(), geom.cols());
    let (h, w, k) = (geom.height as isize, geom.width as isize, geom.kernel);
    let plane = geom.height * geom.width;
    let mut img = vec![T::zero(); geom.channels * plane];
    for c in 0..geom.channels {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for py in 0..oh {
                    let y = geom.source(py, ky);
                    if y < 0 || y >= h {
                        continue;
                    }
                    for px in 0..ow {
                        let x = geom.source(px, kx);
                        if x >= 0 && x < w {
                            dst[y as usize * geom.width + x as usize] += src[py * ow + px];
                        }
                    }
                }
            }
        }
    }
    img
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    /// Geometry of the side that gets unfolded (input for conv, output for transposed).
    geom: PatchGeometry,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

fn conv_dims(xs: &[usize], ws: &[usize], stride: usize, pad: usize, transposed: bool) -> Result<ConvDims> {
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return shape_err(format!("conv2d expects x [N,C,H,W] and square w [O,I,k,k], got {xs:?}, {ws:?}"));
    }
    if ws[1] != xs[1] {
        return shape_err(format!("conv2d channel mismatch: input {} vs weight {}", xs[1], ws[1]));
    }
    if stride == 0 {
        return shape_err("stride must be at least 1");
    }
    let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kernel) = (ws[0], ws[2]);
    if !transposed {
        let geom = PatchGeometry { channels: cin, height: h, width: w, kernel, pad, stride };
        geom.validate()?;
        let out_hw = (geom.rows(), geom.cols());
        Ok(ConvDims { batch, cin, cout, kernel, geom, in_hw: (h, w), out_hw })
    } else {
        let oh = ((h - 1) * stride + kernel) as isize - 2 * pad as isize;
        let ow = ((w - 1) * stride + kernel) as isize - 2 * pad as isize;
        if oh < 1 || ow < 1 {
            return shape_err("transposed conv output would be empty");
        }
        let geom = PatchGeometry { channels: cout, height: oh as usize, width: ow as usize, kernel, pad, stride };
        if geom.rows() != h || geom.cols() != w {
            return shape_err("transposed conv geometry is not invertible");
        }
        Ok(ConvDims { batch, cin, cout, kernel, geom, in_hw: (h, w), out_hw: (oh as usize, ow as usize) })
    }
}

/// `[O, I, k, k]` weights rearranged to `[O*k*k, I]` for the transposed product.
fn transposed_weight<T: Element>(w: &[T], cout: usize, cin: usize, kk: usize) -> Vec<T> {
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..kk {
                wt[(co * kk + t) * cin + ci] = w[(co * cin + ci) * kk + t];
            }
        }
    }
    wt
}

impl<T: Element> Graph<T> {
    /// 2-D convolution (or its transpose) on `[N, C, H, W]` with weights `[out, in, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<Var> {
        let d = conv_dims(self.shape(x), self.shape(w), stride, pad, transposed)?;
        if let Some(b) = b {
            if self.shape(b) != [d.cout] {
                return shape_err(format!("conv bias must be [{}], got {:?}", d.cout, self.shape(b)));
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let kk = d.kernel * d.kernel;
        let in_plane = d.in_hw.0 * d.in_hw.1;
        let out_plane = d.out_hw.0 * d.out_hw.1;
        let mut out = vec![T::zero(); d.batch * d.cout * out_plane];
        let wt = transposed.then(|| transposed_weight(wv, d.cout, d.cin, kk));
        for n in 0..d.batch {
            let xn = &xv[n * d.cin * in_plane..(n + 1) * d.cin * in_plane];
            let on = &mut out[n * d.cout * out_plane..(n + 1) * d.cout * out_plane];
            match &wt {
                None => {
                    let cols = im2col(xn, &d.geom);
                    let ckk = d.cin * kk;
                    T::gemm(
                        d.cout,
                        ckk,
                        out_plane,
                        wv,
                        (ckk as isize, 1),
                        &cols,
                        (out_plane as isize, 1),
                        T::zero(),
                        on,
                        (out_plane as isize, 1),
                    );
                }
                Some(wt) => {
                    let rows = d.cout * kk;
                    let mut cols = vec![T::zero(); rows * in_plane];
                    T::gemm(
                        rows,
                        d.cin,
                        in_plane,
                        wt,
                        (d.cin as isize, 1),
                        xn,
                        (in_plane as isize, 1),
                        T::zero(),
                        &mut cols,
                        (in_plane as isize, 1),
                    );
                    on.copy_from_slice(&col2im(&cols, &d.geom));
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, plane) in on.chunks_mut(out_plane).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let shape = [d.batch, d.cout, d.out_hw.0, d.out_hw.1];
        self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b, stride, pad, transposed }, "conv2d")
    }
}

pub(crate) fn conv2d_vjp<T: Element>(
    g: &Graph<T>,
    (x, w, b): (Var, Var, Option<Var>),
    stride: usize,
    pad: usize,
    transposed: bool,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let d = conv_dims(g.shape(x), g.shape(w), stride, pad, transposed).expect("validated in forward");
    let (xv, wv) = (g.value(x).data(), g.value(w).data());
    let kk = d.kernel * d.kernel;
    let in_plane = d.in_hw.0 * d.in_hw.1;
    let out_plane = d.out_hw.0 * d.out_hw.1;
    let mut gx = vec![T::zero(); xv.len()];
    let mut gw = vec![T::zero(); wv.len()];
    let mut gb = vec![T::zero(); d.cout];
    let wt = transposed.then(|| transposed_weight(wv, d.cout, d.cin, kk));
    let mut gwt = vec![T::zero(); if transposed { wv.len() } else { 0 }];
    for n in 0..d.batch {
        let xn = &xv[n * d.cin * in_plane..(n + 1) * d.cin * in_plane];
        let gn = &grad[n * d.cout * out_plane..(n + 1) * d.cout * out_plane];
        let gxn = &mut gx[n * d.cin * in_plane..(n + 1) * d.cin * in_plane];
        match &wt {
            None => {
                let cols = im2col(xn, &d.geom);
                let ckk = d.cin * kk;
                let p = out_plane as isize;
                // dW += dY cols^T
                T::gemm(d.cout, out_plane, ckk, gn, (p, 1), &cols, (1, p), T::one(), &mut gw, (ckk as isize, 1));
                // dcols = W^T dY
                let mut dcols = vec![T::zero(); ckk * out_plane];
                T::gemm(ckk, d.cout, out_plane, wv, (1, ckk as isize), gn, (p, 1), T::zero(), &mut dcols, (p, 1));
                gxn.copy_from_slice(&col2im(&dcols, &d.geom));
            }
            Some(wt) => {
                let rows = d.cout * kk;
                let dcols = im2col(gn, &d.geom);
                let p = in_plane as isize;
                // dX = Wt^T dcols
                T::gemm(d.cin, rows, in_plane, wt, (1, d.cin as isize), &dcols, (p, 1), T::zero(), gxn, (p, 1));
                // dWt += dcols X^T
                T::gemm(rows, in_plane, d.cin, &dcols, (p, 1), xn, (1, p), T::one(), &mut gwt, (d.cin as isize, 1));
            }
        }
        for (co, plane) in gn.chunks(out_plane).enumerate() {
            gb[co] += plane.iter().copied().sum::<T>();
        }
    }
    if transposed {
        for co in 0..d.cout {
            for ci in 0..d.cin {
                for t in 0..kk {
                    gw[(co * d.cin + ci) * kk + t] = gwt[(co * kk + t) * d.cin + ci];
                }
            }
        }
    }
    let mut out = vec![(x, gx), (w, gw)];
    if let Some(b) = b {
        out.push((b, gb));
    }
    out
}
