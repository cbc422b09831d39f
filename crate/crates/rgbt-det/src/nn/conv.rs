//! Grouped 2-D convolution with explicit backward, im2col + GEMM inside.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis, Ix1, Ix4};
use rand::Rng;
use rayon::prelude::*;

use super::{init, visit_param, Float, Param, ParamVisitor, Parameterized};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// Kernel, shape `(c_out, c_in / groups, k, k)`.
    pub w: Param<F, Ix4>,
    pub b: Param<F, Ix1>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    c_in: usize,
}

impl<F: Float> Conv2d<F> {
    /// Same-padded square-kernel convolution; `pad = k / 2`.
    pub fn new<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("kernel size {k} must be odd")));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide c_in {c_in} and c_out {c_out}"
            )));
        }
        Ok(Conv2d {
            w: Param::new(init::kaiming_conv(rng, c_out, c_in / groups, k, k)),
            b: Param::new(init::zeros1(c_out)),
            stride,
            pad: k / 2,
            groups,
            c_in,
        })
    }

    pub fn c_out(&self) -> usize {
        self.w.v.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.w.v.shape()[2]
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (bsz, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let c_out = self.c_out();

        // 1x1 stride-1 ungrouped convs are plain matmuls; skip im2col.
        if self.kernel() == 1 && self.stride == 1 && self.groups == 1 {
            let wm = self
                .w
                .v
                .view()
                .into_shape_with_order((c_out, c_in))
                .unwrap();
            let per_image: Vec<Array2<F>> = (0..bsz)
                .into_par_iter()
                .map(|bi| {
                    let xm = x
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((c_in, h * w))
                        .unwrap();
                    wm.dot(&xm)
                })
                .collect();
            let mut y = Array4::zeros((bsz, c_out, ho, wo));
            for (bi, ym) in per_image.into_iter().enumerate() {
                y.index_axis_mut(Axis(0), bi)
                    .assign(&ym.into_shape_with_order((c_out, ho, wo)).unwrap());
            }
            for (c, &bc) in self.b.v.iter().enumerate() {
                y.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + bc);
            }
            return y;
        }

        let per_image: Vec<Array3<F>> = (0..bsz)
            .into_par_iter()
            .map(|bi| self.forward_single(x.index_axis(Axis(0), bi), ho, wo))
            .collect();
        let mut y = Array4::zeros((bsz, c_out, ho, wo));
        for (bi, yb) in per_image.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), bi).assign(&yb);
        }
        y
    }

    fn forward_single(&self, xb: ArrayView3<F>, ho: usize, wo: usize) -> Array3<F> {
        let c_out = self.c_out();
        let c_in_g = self.c_in / self.groups;
        let c_out_g = c_out / self.groups;
        let k = self.kernel();
        let l = c_in_g * k * k;

        let cols = im2col(xb, k, self.stride, self.pad, ho, wo);
        let wm = self
            .w
            .v
            .view()
            .into_shape_with_order((c_out, l))
            .unwrap();
        let mut y = Array3::zeros((c_out, ho, wo));
        for g in 0..self.groups {
            let wg = wm.slice(s![g * c_out_g..(g + 1) * c_out_g, ..]);
            let cg = cols.slice(s![g * l..(g + 1) * l, ..]);
            let yg = wg.dot(&cg);
            y.slice_mut(s![g * c_out_g..(g + 1) * c_out_g, .., ..])
                .assign(&yg.into_shape_with_order((c_out_g, ho, wo)).unwrap());
        }
        for (c, &bc) in self.b.v.iter().enumerate() {
            y.index_axis_mut(Axis(0), c).mapv_inplace(|v| v + bc);
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<F>, gy: &Array4<F>) -> Array4<F> {
        let (bsz, c_in, h, w) = x.dim();
        let (_, c_out, ho, wo) = gy.dim();
        assert_eq!(c_out, self.c_out(), "conv grad channels");

        for c in 0..c_out {
            self.b.g[c] = self.b.g[c] + gy.slice(s![.., c, .., ..]).sum();
        }

        if self.kernel() == 1 && self.stride == 1 && self.groups == 1 {
            let wm = self
                .w
                .v
                .view()
                .into_shape_with_order((c_out, c_in))
                .unwrap();
            let per_image: Vec<(Array2<F>, Array2<F>)> = (0..bsz)
                .into_par_iter()
                .map(|bi| {
                    let xm = x
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((c_in, h * w))
                        .unwrap();
                    let gm = gy
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((c_out, ho * wo))
                        .unwrap();
                    let gw = gm.dot(&xm.t());
                    let gx = wm.t().dot(&gm);
                    (gx, gw)
                })
                .collect();
            let mut gx = Array4::zeros((bsz, c_in, h, w));
            let mut gw_acc = Array2::<F>::zeros((c_out, c_in));
            for (bi, (gxb, gwb)) in per_image.into_iter().enumerate() {
                gx.index_axis_mut(Axis(0), bi)
                    .assign(&gxb.into_shape_with_order((c_in, h, w)).unwrap());
                gw_acc += &gwb;
            }
            let mut gwm = self
                .w
                .g
                .view_mut()
                .into_shape_with_order((c_out, c_in))
                .unwrap();
            gwm += &gw_acc;
            return gx;
        }

        let c_in_g = c_in / self.groups;
        let c_out_g = c_out / self.groups;
        let k = self.kernel();
        let l = c_in_g * k * k;
        let wm = self
            .w
            .v
            .view()
            .into_shape_with_order((c_out, l))
            .unwrap();

        let per_image: Vec<(Array3<F>, Array2<F>)> = (0..bsz)
            .into_par_iter()
            .map(|bi| {
                let xb = x.index_axis(Axis(0), bi);
                let cols = im2col(xb, k, self.stride, self.pad, ho, wo);
                let mut gw = Array2::zeros((c_out, l));
                let mut gcols = Array2::zeros((self.groups * l, ho * wo));
                for g in 0..self.groups {
                    let gm = gy
                        .slice(s![bi, g * c_out_g..(g + 1) * c_out_g, .., ..])
                        .into_shape_with_order((c_out_g, ho * wo))
                        .unwrap();
                    let cg = cols.slice(s![g * l..(g + 1) * l, ..]);
                    gw.slice_mut(s![g * c_out_g..(g + 1) * c_out_g, ..])
                        .assign(&gm.dot(&cg.t()));
                    let wg = wm.slice(s![g * c_out_g..(g + 1) * c_out_g, ..]);
                    gcols
                        .slice_mut(s![g * l..(g + 1) * l, ..])
                        .assign(&wg.t().dot(&gm));
                }
                let gxb = col2im(&gcols, (c_in, h, w), k, self.stride, self.pad, ho, wo);
                (gxb, gw)
            })
            .collect();

        let mut gx = Array4::zeros((bsz, c_in, h, w));
        let mut gw_acc = Array2::<F>::zeros((c_out, l));
        for (bi, (gxb, gwb)) in per_image.into_iter().enumerate() {
            gx.index_axis_mut(Axis(0), bi).assign(&gxb);
            gw_acc += &gwb;
        }
        let mut gwm = self
            .w
            .g
            .view_mut()
            .into_shape_with_order((c_out, l))
            .unwrap();
        gwm += &gw_acc;
        gx
    }
}

impl<F: Float> Parameterized<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        visit_param(prefix, "w", &mut self.w, v);
        visit_param(prefix, "b", &mut self.b, v);
    }
}

/// Unfolds `(C, H, W)` into `(C*k*k, Ho*Wo)`; out-of-image taps are zero.
fn im2col<F: Float>(
    x: ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::zeros((c_in * k * k, ho * wo));
    let cols_slice = cols.as_slice_mut().unwrap();
    for c in 0..c_in {
        let xc = x.index_axis(Axis(0), c);
        let xs = xc.to_slice().expect("input is standard layout");
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut cols_slice[base + oy * wo..base + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        continue; // already zero
                    }
                    let iy = iy as usize;
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            *o = xs[iy * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
fn col2im<F: Float>(
    gcols: &Array2<F>,
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<F> {
    let (c_in, h, w) = shape;
    let mut gx = Array3::zeros((c_in, h, w));
    let gxs = gx.as_slice_mut().unwrap();
    let gs = gcols.as_slice().unwrap();
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            let idx = (c * h + iy) * w + ix as usize;
                            gxs[idx] = gxs[idx] + gs[base + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}
