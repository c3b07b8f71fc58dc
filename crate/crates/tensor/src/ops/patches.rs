use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, PatchGeometry, Var};
use crate::ops::conv::{col2im, im2col};
use crate::ops::shape::permute_data;
use crate::tensor::Tensor;

/// Number of patches covering each pixel of a single-channel plane.
pub(crate) fn coverage_counts(geom: &PatchGeometry) -> Vec<f64> {
    let one = PatchGeometry { channels: 1, ..*geom };
    let ones = vec![1f64; one.patch_len() * one.patch_count()];
    col2im(&ones, &one)
}

fn resize_axis_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Element> Graph<T> {
    /// Sliding `k x k` patches of a `[1, C, H, W]` map as `[L, C*k*k]` rows, raster order
    /// of patch positions; columns are ordered (channel, ky, kx).
    pub fn unfold(&mut self, x: Var, kernel: usize, pad: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[0] != 1 {
            return shape_err(format!("unfold expects [1, C, H, W], got {s:?}"));
        }
        let geom = PatchGeometry { channels: s[1], height: s[2], width: s[3], kernel, pad, stride };
        geom.validate()?;
        let cols = im2col(self.value(x).data(), &geom);
        let (rows, l) = (geom.patch_len(), geom.patch_count());
        let data = permute_data(&cols, &[rows, l], &[1, 0]);
        self.push(Tensor::new(&[l, rows], data)?, Op::Unfold { x, geom }, "unfold")
    }

    /// Inverse of [`Graph::unfold`]: overlapping contributions are summed and divided
    /// by how many patches cover each pixel.
    pub fn fold(
        &mut self,
        patches: Var,
        height: usize,
        width: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
    ) -> Result<Var> {
        let s = self.shape(patches).to_vec();
        if s.len() != 2 || !s[1].is_multiple_of(kernel * kernel) {
            return shape_err(format!("fold expects [L, C*k*k], got {s:?}"));
        }
        let channels = s[1] / (kernel * kernel);
        let geom = PatchGeometry { channels, height, width, kernel, pad, stride };
        geom.validate()?;
        if geom.patch_count() != s[0] {
            return shape_err(format!(
                "fold of {}x{} (k {kernel}, p {pad}, r {stride}) needs {} patches, got {}",
                height,
                width,
                geom.patch_count(),
                s[0]
            ));
        }
        let cols = permute_data(self.value(patches).data(), &s, &[1, 0]);
        let mut img = col2im(&cols, &geom);
        let counts = coverage_counts(&geom);
        let plane = height * width;
        for (i, v) in img.iter_mut().enumerate() {
            let c = counts[i % plane];
            *v = if c > 0.0 { T::of(v.as_f64() / c) } else { T::zero() };
        }
        self.push(
            Tensor::new(&[1, channels, height, width], img)?,
            Op::Fold { x: patches, geom, counts },
            "fold",
        )
    }

    /// Bilinear upsampling of `[N, C, H, W]` by an integer factor, half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return shape_err(format!("resize expects [N, C, H, W] and factor >= 1, got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        let (ty, tx) = (resize_axis_taps(h, factor), resize_axis_taps(w, factor));
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in src.chunks(h * w) {
            for &(y0, y1, wy) in &ty {
                for &(x0, x1, wx) in &tx {
                    let p = |yy: usize, xx: usize| plane[yy * w + xx].as_f64();
                    let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                    let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                    out.push(T::of(top * (1.0 - wy) + bot * wy));
                }
            }
        }
        self.push(Tensor::new(&[s[0], s[1], oh, ow], out)?, Op::Resize { x, factor }, "resize_bilinear")
    }
}

pub(crate) fn unfold_vjp<T: Element>(geom: &PatchGeometry, grad: &[T]) -> Vec<T> {
    let cols = permute_data(grad, &[geom.patch_count(), geom.patch_len()], &[1, 0]);
    col2im(&cols, geom)
}

pub(crate) fn fold_vjp<T: Element>(geom: &PatchGeometry, counts: &[f64], grad: &[T]) -> Vec<T> {
    let plane = geom.height * geom.width;
    let scaled: Vec<T> = grad
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let c = counts[i % plane];
            if c > 0.0 {
                T::of(g.as_f64() / c)
            } else {
                T::zero()
            }
        })
        .collect();
    let cols = im2col(&scaled, geom);
    permute_data(&cols, &[geom.patch_len(), geom.patch_count()], &[1, 0])
}

pub(crate) fn resize_vjp<T: Element>(x: &Tensor<T>, factor: usize, grad: &[T]) -> Vec<T> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (ty, tx) = (resize_axis_taps(h, factor), resize_axis_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0f64; x.numel()];
    for (p, gplane) in grad.chunks(oh * ow).enumerate() {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = gplane[oy * ow + ox].as_f64();
                dst[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                dst[y0 * w + x1] += gv * (1.0 - wy) * wx;
                dst[y1 * w + x0] += gv * wy * (1.0 - wx);
                dst[y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    out.into_iter().map(T::of).collect()
}
