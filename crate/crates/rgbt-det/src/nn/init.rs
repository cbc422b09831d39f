//! Seeded parameter initialization.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;

use super::{fl, Float};

/// Kaiming-uniform fan-in initialization for a conv kernel
/// of shape `(c_out, c_in_per_group, kh, kw)`.
pub fn kaiming_conv<F: Float, R: Rng>(
    rng: &mut R,
    c_out: usize,
    c_in_g: usize,
    kh: usize,
    kw: usize,
) -> Array4<F> {
    let fan_in = (c_in_g * kh * kw) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Array4::from_shape_simple_fn((c_out, c_in_g, kh, kw), || {
        fl(rng.gen_range(-bound..bound))
    })
}

/// Kaiming-uniform fan-in initialization for a dense weight `(out, in)`.
pub fn kaiming_linear<F: Float, R: Rng>(rng: &mut R, out: usize, inp: usize) -> Array2<F> {
    let bound = (6.0 / inp as f64).sqrt();
    Array2::from_shape_simple_fn((out, inp), || fl(rng.gen_range(-bound..bound)))
}

pub fn zeros1<F: Float>(n: usize) -> Array1<F> {
    Array1::zeros(n)
}

pub fn ones1<F: Float>(n: usize) -> Array1<F> {
    Array1::from_elem(n, F::one())
}
