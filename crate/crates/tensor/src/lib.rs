//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar fills in gradients for the leaves that
//! were created with gradient tracking. The element type is generic so the
//! same model code can be run in `f64` for finite-difference checks.

mod element;
mod error;
pub mod gradcheck;
mod graph;
pub mod io;
mod ops;
mod params;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sampled, DEFAULT_STEP};
pub use graph::{Graph, PatchGeometry, Var};
pub use params::{BoundParams, ParamStore};
pub use tensor::Tensor;

/// Reference im2col/col2im kernels, exposed for oracle tests.
pub mod kernels {
    use crate::{Element, PatchGeometry};

    pub fn im2col<T: Element>(img: &[T], geom: &PatchGeometry) -> Vec<T> {
        crate::ops::im2col(img, geom)
    }

    pub fn col2im<T: Element>(cols: &[T], geom: &PatchGeometry) -> Vec<T> {
        crate::ops::col2im(cols, geom)
    }

    /// Per-pixel patch coverage of one plane.
    pub fn coverage(geom: &PatchGeometry) -> Vec<f64> {
        crate::ops::coverage_counts(geom)
    }
}
