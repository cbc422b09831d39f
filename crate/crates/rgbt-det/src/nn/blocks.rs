//! Conv block (conv + group norm + SiLU) and the bottleneck residual unit.

use ndarray::Array4;
use rand::Rng;

use super::norm::GnCache;
use super::ops::{silu_backward, silu_forward};
use super::{Conv2d, Float, GroupNorm, ParamVisitor, Parameterized};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct ConvBlock<F> {
    pub conv: Conv2d<F>,
    pub norm: Option<GroupNorm<F>>,
    pub act: bool,
}

#[derive(Debug)]
pub struct ConvBlockCache<F> {
    x: Array4<F>,
    z: Option<Array4<F>>,
    gn: Option<GnCache<F>>,
    n: Option<Array4<F>>,
}

impl<F: Float> ConvBlock<F> {
    pub fn new<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv2d::new(rng, c_in, c_out, k, stride, groups)?,
            norm: Some(GroupNorm::new(c_out)),
            act: true,
        })
    }

    /// Bare convolution without normalization or activation (prediction
    /// heads, and the identity fixtures used in tests).
    pub fn plain<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv2d::new(rng, c_in, c_out, k, stride, groups)?,
            norm: None,
            act: false,
        })
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let mut y = self.conv.forward(x);
        if let Some(norm) = &self.norm {
            y = norm.forward(&y).0;
        }
        if self.act {
            y = silu_forward(&y);
        }
        y
    }

    pub fn forward_t(&self, x: &Array4<F>) -> (Array4<F>, ConvBlockCache<F>) {
        let z = self.conv.forward(x);
        let mut cache = ConvBlockCache {
            x: x.clone(),
            z: None,
            gn: None,
            n: None,
        };
        let y = match (&self.norm, self.act) {
            (Some(norm), act) => {
                let (n, gn) = norm.forward(&z);
                cache.gn = Some(gn);
                cache.z = Some(z);
                if act {
                    let y = silu_forward(&n);
                    cache.n = Some(n);
                    y
                } else {
                    n
                }
            }
            (None, true) => {
                let y = silu_forward(&z);
                cache.z = Some(z);
                y
            }
            (None, false) => z,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &ConvBlockCache<F>, gy: &Array4<F>) -> Array4<F> {
        let mut g = match (&self.norm, self.act) {
            (Some(_), true) => silu_backward(cache.n.as_ref().unwrap(), gy),
            (None, true) => silu_backward(cache.z.as_ref().unwrap(), gy),
            _ => gy.clone(),
        };
        if let Some(norm) = &mut self.norm {
            g = norm.backward(cache.z.as_ref().unwrap(), cache.gn.as_ref().unwrap(), &g);
        }
        self.conv.backward(&cache.x, &g)
    }
}

impl<F: Float> Parameterized<F> for ConvBlock<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.conv.visit_params(&p("conv"), v);
        if let Some(norm) = &mut self.norm {
            norm.visit_params(&p("norm"), v);
        }
    }
}

/// Residual unit: `x + conv3x3(conv1x1(x))` with a halved hidden width.
#[derive(Debug, Clone)]
pub struct Bottleneck<F> {
    pub reduce: ConvBlock<F>,
    pub expand: ConvBlock<F>,
}

#[derive(Debug)]
pub struct BottleneckCache<F> {
    c1: ConvBlockCache<F>,
    c2: ConvBlockCache<F>,
}

impl<F: Float> Bottleneck<F> {
    pub fn new<R: Rng>(rng: &mut R, c: usize) -> Result<Self> {
        let hidden = (c / 2).max(1);
        Ok(Bottleneck {
            reduce: ConvBlock::new(rng, c, hidden, 1, 1, 1)?,
            expand: ConvBlock::new(rng, hidden, c, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        x + &self.expand.forward(&self.reduce.forward(x))
    }

    pub fn forward_t(&self, x: &Array4<F>) -> (Array4<F>, BottleneckCache<F>) {
        let (h, c1) = self.reduce.forward_t(x);
        let (y, c2) = self.expand.forward_t(&h);
        (x + &y, BottleneckCache { c1, c2 })
    }

    pub fn backward(&mut self, cache: &BottleneckCache<F>, gy: &Array4<F>) -> Array4<F> {
        let gh = self.expand.backward(&cache.c2, gy);
        let gx = self.reduce.backward(&cache.c1, &gh);
        gx + gy
    }
}

impl<F: Float> Parameterized<F> for Bottleneck<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.reduce.visit_params(&p("reduce"), v);
        self.expand.visit_params(&p("expand"), v);
    }
}
