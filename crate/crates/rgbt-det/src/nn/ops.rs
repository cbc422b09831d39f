//! Parameter-free tensor ops with explicit backward companions.

use ndarray::{s, Array2, Array4, Axis};

use super::{fl, Float};

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Numerically-safe logit; clamps p into (eps, 1-eps).
#[inline]
pub fn logit<F: Float>(p: F, eps: f64) -> F {
    let lo = fl::<F>(eps);
    let hi = F::one() - lo;
    let p = p.max(lo).min(hi);
    (p / (F::one() - p)).ln()
}

pub fn silu_forward<F: Float>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<F: Float>(x: &Array4<F>, gy: &Array4<F>) -> Array4<F> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g = *g * (s * (F::one() + v * (F::one() - s)));
    });
    gx
}

pub fn relu_forward<F: Float>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Float>(x: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

/// Global average pool `(B,C,H,W) -> (B,C)`.
pub fn gap_forward<F: Float>(x: &Array4<F>) -> Array2<F> {
    let (_, _, h, w) = x.dim();
    let n = fl::<F>((h * w) as f64);
    x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v / n)
}

pub fn gap_backward<F: Float>(shape: (usize, usize, usize, usize), gy: &Array2<F>) -> Array4<F> {
    let (b, c, h, w) = shape;
    let n = fl::<F>((h * w) as f64);
    let mut gx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = gy[[bi, ci]] / n;
            gx.slice_mut(s![bi, ci, .., ..]).fill(g);
        }
    }
    gx
}

/// Nearest-neighbor 2x upsample.
pub fn upsample2_forward<F: Float>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x[[bi, ci, iy, ix]];
                    y[[bi, ci, 2 * iy, 2 * ix]] = v;
                    y[[bi, ci, 2 * iy, 2 * ix + 1]] = v;
                    y[[bi, ci, 2 * iy + 1, 2 * ix]] = v;
                    y[[bi, ci, 2 * iy + 1, 2 * ix + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<F: Float>(gy: &Array4<F>) -> Array4<F> {
    let (b, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    gx[[bi, ci, iy, ix]] = gy[[bi, ci, 2 * iy, 2 * ix]]
                        + gy[[bi, ci, 2 * iy, 2 * ix + 1]]
                        + gy[[bi, ci, 2 * iy + 1, 2 * ix]]
                        + gy[[bi, ci, 2 * iy + 1, 2 * ix + 1]];
                }
            }
        }
    }
    gx
}

/// Channel concatenation of two maps with identical (B,H,W).
///
/// Always returns a standard-layout array; the conv fast paths reshape
/// without copying and `concatenate` alone does not guarantee that.
pub fn concat_channels<F: Float>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    concat_channel_views(&[a.view(), b.view()])
}

pub fn concat_channel_views<F: Float>(parts: &[ndarray::ArrayView4<F>]) -> Array4<F> {
    let c = ndarray::concatenate(Axis(1), parts).expect("compatible shapes");
    if c.is_standard_layout() {
        c
    } else {
        c.as_standard_layout().to_owned()
    }
}

/// Splits the channel axis at `c`.
pub fn split_channels<F: Float>(x: &Array4<F>, c: usize) -> (Array4<F>, Array4<F>) {
    (
        x.slice(s![.., ..c, .., ..]).to_owned(),
        x.slice(s![.., c.., .., ..]).to_owned(),
    )
}
