//! Minimal differentiable-layer toolkit the detector is built from.
//!
//! Layers own their parameters and accumulated gradients and expose explicit
//! `forward` / `backward` pairs; composite blocks thread cache structs through
//! so the backward pass revisits exactly what the forward pass computed.
//! Everything is generic over [`Float`] so training runs in `f32` while
//! finite-difference verification runs in `f64`.

pub mod blocks;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod sgd;

pub use blocks::{Bottleneck, ConvBlock};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::GroupNorm;

use ndarray::{Array, Dimension};

/// Scalar element type for all tensors in the crate.
pub trait Float:
    ndarray::NdFloat + num_traits_compat::FromF64 + std::iter::Sum + Send + Sync + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

/// Tiny shim so `Float` can round-trip through `f64` without pulling the
/// whole `num-traits` cast machinery into every signature.
pub mod num_traits_compat {
    pub trait FromF64: Copy {
        fn from_f64(v: f64) -> Self;
        fn as_f64(self) -> f64;
    }
    impl FromF64 for f32 {
        fn from_f64(v: f64) -> Self {
            v as f32
        }
        fn as_f64(self) -> f64 {
            self as f64
        }
    }
    impl FromF64 for f64 {
        fn from_f64(v: f64) -> Self {
            v
        }
        fn as_f64(self) -> f64 {
            self
        }
    }
}

/// Convenience cast used all over the numeric code.
#[inline]
pub fn fl<F: Float>(v: f64) -> F {
    F::from_f64(v)
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F, D: Dimension> {
    pub v: Array<F, D>,
    pub g: Array<F, D>,
}

impl<F: Float, D: Dimension> Param<F, D> {
    pub fn new(v: Array<F, D>) -> Self {
        let g = Array::zeros(v.raw_dim());
        Param { v, g }
    }
}

/// Borrowed view of one parameter tensor handed to a [`ParamVisitor`].
pub struct ParamRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub v: &'a mut [F],
    pub g: &'a mut [F],
}

/// Visitor over every trainable parameter of a module tree.
///
/// Used by the optimizer, the checkpoint writer, gradient zeroing, and the
/// finite-difference harness; names are stable across runs.
pub trait ParamVisitor<F> {
    fn visit(&mut self, p: ParamRef<'_, F>);
}

impl<F, T: FnMut(ParamRef<'_, F>)> ParamVisitor<F> for T {
    fn visit(&mut self, p: ParamRef<'_, F>) {
        self(p)
    }
}

/// Anything that owns parameters.
pub trait Parameterized<F: Float> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>);

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |p: ParamRef<'_, F>| {
            p.g.fill(F::zero());
        });
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |p: ParamRef<'_, F>| n += p.v.len());
        n
    }
}

/// Visits one `Param`, appending `name` to `prefix` with a dot separator.
pub fn visit_param<F: Float, D: Dimension>(
    prefix: &str,
    name: &str,
    p: &mut Param<F, D>,
    vis: &mut dyn ParamVisitor<F>,
) {
    let full = if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    };
    let shape = p.v.shape().to_vec();
    let r = ParamRef {
        name: full,
        shape,
        v: p.v.as_slice_mut().expect("params are standard layout"),
        g: p.g.as_slice_mut().expect("params are standard layout"),
    };
    vis.visit(r);
}
