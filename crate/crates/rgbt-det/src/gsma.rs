//! Group Shuffled Multi-receptive Attention.
//!
//! Each modality runs through an SPC stack (channel-split multi-kernel
//! grouped convolutions), a shared SEWeight gate per branch, optional
//! cross-branch softmax normalization, and elementwise recalibration; the two
//! refined maps are then interleaved by the group shuffle permutation.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{
    concat_channel_views, concat_channels, gap_backward, gap_forward, relu_backward,
    relu_forward, sigmoid, split_channels,
};
use crate::nn::{fl, ConvBlock, Float, Linear, ParamVisitor, Parameterized};
use crate::shuffle::{group_shuffle, group_shuffle_backward, ShuffleSpec};

/// Whether group shuffle runs after the attention paths (default, the
/// stronger variant) or before them (ablation variant: the raw modality maps
/// are interleaved first and attention runs on the two halves of the mix).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleOrder {
    AfterAttention,
    BeforeAttention,
}

#[derive(Debug, Clone)]
pub struct GsmaConfig {
    pub channels_per_modality: usize,
    pub shuffle_groups: usize,
    pub spc_kernel_sizes: Vec<usize>,
    pub spc_group_counts: Vec<usize>,
    pub se_reduction: usize,
    pub cross_scale_softmax: bool,
    pub shuffle_order: ShuffleOrder,
}

impl GsmaConfig {
    /// Defaults: kernels 3/5/7/9 with groups 1/4/8/16, K = 16, r = 4.
    pub fn new(channels_per_modality: usize) -> Self {
        GsmaConfig {
            channels_per_modality,
            shuffle_groups: 16,
            spc_kernel_sizes: vec![3, 5, 7, 9],
            spc_group_counts: vec![1, 4, 8, 16],
            se_reduction: 4,
            cross_scale_softmax: true,
            shuffle_order: ShuffleOrder::AfterAttention,
        }
    }

    pub fn branch_count(&self) -> usize {
        self.spc_kernel_sizes.len()
    }

    pub fn branch_width(&self) -> usize {
        self.channels_per_modality / self.branch_count()
    }

    /// Requested group counts scaled down to the branch width: the effective
    /// count is the largest divisor of `C/S` not exceeding the request.
    pub fn effective_groups(&self) -> Vec<usize> {
        let w = self.branch_width();
        self.spc_group_counts
            .iter()
            .map(|&g| (1..=g.min(w)).rev().find(|d| w % d == 0).unwrap_or(1))
            .collect()
    }

    pub fn shuffle_spec(&self) -> Result<ShuffleSpec> {
        ShuffleSpec::new(self.channels_per_modality, self.shuffle_groups)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.branch_count();
        if s == 0 {
            return Err(Error::Config("SPC needs at least one branch".into()));
        }
        if self.spc_group_counts.len() != s {
            return Err(Error::Config(format!(
                "{} kernel sizes but {} group counts",
                s,
                self.spc_group_counts.len()
            )));
        }
        if self.channels_per_modality % s != 0 {
            return Err(Error::Config(format!(
                "channel count {} not divisible by branch count {s}",
                self.channels_per_modality
            )));
        }
        if self.spc_kernel_sizes.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Config("SPC kernel sizes must be odd".into()));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be positive".into()));
        }
        self.shuffle_spec()?;
        Ok(())
    }
}

/// Squeeze-pyramid-concat: split channels into S equal parts, convolve part
/// `i` with kernel `k_i` (same padding) and its scaled group count, concat.
#[derive(Debug, Clone)]
pub struct Spc<F> {
    pub branches: Vec<ConvBlock<F>>,
    branch_width: usize,
}

pub struct SpcCache<F> {
    branch: Vec<crate::nn::blocks::ConvBlockCache<F>>,
}

impl<F: Float> Spc<F> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &GsmaConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.branch_width();
        let groups = cfg.effective_groups();
        let branches = cfg
            .spc_kernel_sizes
            .iter()
            .zip(groups)
            .map(|(&k, g)| ConvBlock::new(rng, w, w, k, 1, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Spc {
            branches,
            branch_width: w,
        })
    }

    /// Test fixture: bare delta-kernel convolutions, so `spc(x) = x` exactly.
    pub fn identity<R: Rng>(rng: &mut R, cfg: &GsmaConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.branch_width();
        let groups = cfg.effective_groups();
        let branches = cfg
            .spc_kernel_sizes
            .iter()
            .zip(groups)
            .map(|(&k, g)| {
                let mut cb = ConvBlock::plain(rng, w, w, k, 1, g)?;
                cb.conv.w.v.fill(F::zero());
                cb.conv.b.v.fill(F::zero());
                let cig = w / g;
                for c in 0..w {
                    cb.conv.w.v[[c, c % cig, k / 2, k / 2]] = F::one();
                }
                Ok(cb)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Spc {
            branches,
            branch_width: w,
        })
    }

    fn split<'a>(&self, x: &'a Array4<F>) -> Vec<ndarray::ArrayView4<'a, F>> {
        let w = self.branch_width;
        (0..self.branches.len())
            .map(|i| x.slice(s![.., i * w..(i + 1) * w, .., ..]))
            .collect()
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let outs: Vec<Array4<F>> = self
            .split(x)
            .iter()
            .zip(&self.branches)
            .map(|(part, cb)| cb.forward(&part.to_owned()))
            .collect();
        let views: Vec<_> = outs.iter().map(|a| a.view()).collect();
        concat_channel_views(&views)
    }

    pub fn forward_t(&self, x: &Array4<F>) -> (Vec<Array4<F>>, SpcCache<F>) {
        let mut ys = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for (part, cb) in self.split(x).iter().zip(&self.branches) {
            let (y, c) = cb.forward_t(&part.to_owned());
            ys.push(y);
            caches.push(c);
        }
        (ys, SpcCache { branch: caches })
    }

    pub fn backward(&mut self, cache: &SpcCache<F>, gy_parts: &[Array4<F>]) -> Array4<F> {
        let gx: Vec<Array4<F>> = self
            .branches
            .iter_mut()
            .zip(&cache.branch)
            .zip(gy_parts)
            .map(|((cb, c), g)| cb.backward(c, g))
            .collect();
        let views: Vec<_> = gx.iter().map(|a| a.view()).collect();
        concat_channel_views(&views)
    }
}

impl<F: Float> Parameterized<F> for Spc<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.branch{i}"), v);
        }
    }
}

/// Squeeze-and-excitation channel gate: GAP, bottleneck affine, rectifier,
/// expansion affine, logistic squashing. Output lies in (0, 1).
#[derive(Debug, Clone)]
pub struct SeWeight<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct SeCache<F> {
    shape: (usize, usize, usize, usize),
    pooled: Array2<F>,
    z1: Array2<F>,
    h: Array2<F>,
    out: Array2<F>,
}

impl<F: Float> SeWeight<F> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize, reduction: usize) -> Self {
        let mid = (channels / reduction).max(1);
        let mut fc1 = Linear::new(rng, channels, mid);
        // keep the narrow bottleneck out of the dead-ReLU regime at init
        fc1.b.v.fill(fl(0.1));
        SeWeight {
            fc1,
            fc2: Linear::new(rng, mid, channels),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> Array2<F> {
        self.forward_t(x).0
    }

    pub fn forward_t(&self, x: &Array4<F>) -> (Array2<F>, SeCache<F>) {
        let pooled = gap_forward(x);
        let z1 = self.fc1.forward(&pooled);
        let h = relu_forward(&z1);
        let z2 = self.fc2.forward(&h);
        let out = z2.mapv(sigmoid);
        (
            out.clone(),
            SeCache {
                shape: x.dim(),
                pooled,
                z1,
                h,
                out,
            },
        )
    }

    /// Returns the gradient w.r.t. the spatial input.
    pub fn backward(&mut self, cache: &SeCache<F>, g_out: &Array2<F>) -> Array4<F> {
        let g_z2 = {
            let mut g = g_out.clone();
            g.zip_mut_with(&cache.out, |gv, &o| *gv = *gv * o * (F::one() - o));
            g
        };
        let g_h = self.fc2.backward(&cache.h, &g_z2);
        let g_z1 = relu_backward(&cache.z1, &g_h);
        let g_pooled = self.fc1.backward(&cache.pooled, &g_z1);
        gap_backward(cache.shape, &g_pooled)
    }
}

impl<F: Float> Parameterized<F> for SeWeight<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.fc1.visit_params(&format!("{prefix}.fc1"), v);
        self.fc2.visit_params(&format!("{prefix}.fc2"), v);
    }
}

/// One modality attention path: SPC features gated by per-branch SE weights,
/// optionally softmax-normalized across branches.
#[derive(Debug, Clone)]
pub struct MultiReceptiveAttention<F> {
    pub spc: Spc<F>,
    pub se: SeWeight<F>,
    pub cross_scale_softmax: bool,
    /// Test fixture: force all attention weights to exactly 1.
    pub bypass_gate: bool,
}

pub struct MraCache<F> {
    spc: SpcCache<F>,
    ys: Vec<Array4<F>>,
    se: Vec<SeCache<F>>,
    w_tilde: Array3<F>,
}

impl<F: Float> MultiReceptiveAttention<F> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &GsmaConfig) -> Result<Self> {
        Ok(MultiReceptiveAttention {
            spc: Spc::new(rng, cfg)?,
            se: SeWeight::new(rng, cfg.branch_width(), cfg.se_reduction),
            cross_scale_softmax: cfg.cross_scale_softmax,
            bypass_gate: false,
        })
    }

    /// Identity fixture: delta SPC kernels and gates pinned to 1, so the path
    /// is exactly the identity map.
    pub fn identity<R: Rng>(rng: &mut R, cfg: &GsmaConfig) -> Result<Self> {
        Ok(MultiReceptiveAttention {
            spc: Spc::identity(rng, cfg)?,
            se: SeWeight::new(rng, cfg.branch_width(), cfg.se_reduction),
            cross_scale_softmax: cfg.cross_scale_softmax,
            bypass_gate: true,
        })
    }

    /// Branch weights after optional softmax normalization, `(B, S, C/S)`.
    pub fn branch_weights(&self, x: &Array4<F>) -> Array3<F> {
        let (ys, _) = self.spc.forward_t(x);
        self.gate(&ys).0
    }

    fn gate(&self, ys: &[Array4<F>]) -> (Array3<F>, Vec<SeCache<F>>) {
        let s_branches = ys.len();
        let (b, cb, _, _) = ys[0].dim();
        let mut w = Array3::zeros((b, s_branches, cb));
        let mut caches = Vec::with_capacity(s_branches);
        for (i, y) in ys.iter().enumerate() {
            let (wi, cache) = self.se.forward_t(y);
            w.slice_mut(s![.., i, ..]).assign(&wi);
            caches.push(cache);
        }
        let w_tilde = if self.bypass_gate {
            Array3::from_elem(w.raw_dim(), F::one())
        } else if self.cross_scale_softmax {
            softmax_over_branches(&w)
        } else {
            w
        };
        (w_tilde, caches)
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        self.forward_t(x).0
    }

    pub fn forward_t(&self, x: &Array4<F>) -> (Array4<F>, MraCache<F>) {
        let (ys, spc_cache) = self.spc.forward_t(x);
        let (w_tilde, se_caches) = self.gate(&ys);
        let outs: Vec<Array4<F>> = ys
            .iter()
            .enumerate()
            .map(|(i, y)| scale_channels(y, &w_tilde.slice(s![.., i, ..]).to_owned()))
            .collect();
        let views: Vec<_> = outs.iter().map(|a| a.view()).collect();
        let out = concat_channel_views(&views);
        (
            out,
            MraCache {
                spc: spc_cache,
                ys,
                se: se_caches,
                w_tilde,
            },
        )
    }

    pub fn backward(&mut self, cache: &MraCache<F>, gy: &Array4<F>) -> Array4<F> {
        let s_branches = cache.ys.len();
        let (b, cb, _, _) = cache.ys[0].dim();
        let w = cache.ys[0].dim().1;

        // split incoming gradient per branch and take the two product terms
        let mut g_y: Vec<Array4<F>> = Vec::with_capacity(s_branches);
        let mut g_wt = Array3::<F>::zeros((b, s_branches, cb));
        for i in 0..s_branches {
            let gyi = gy.slice(s![.., i * w..(i + 1) * w, .., ..]).to_owned();
            let wt = cache.w_tilde.slice(s![.., i, ..]).to_owned();
            g_y.push(scale_channels(&gyi, &wt));
            let prod = &gyi * &cache.ys[i];
            let sums = prod.sum_axis(Axis(3)).sum_axis(Axis(2));
            g_wt.slice_mut(s![.., i, ..]).assign(&sums);
        }

        if !self.bypass_gate {
            let g_w = if self.cross_scale_softmax {
                softmax_backward_over_branches(&cache.w_tilde, &g_wt)
            } else {
                g_wt
            };
            for i in 0..s_branches {
                let gw_i = g_w.slice(s![.., i, ..]).to_owned();
                let gy_from_se = self.se.backward(&cache.se[i], &gw_i);
                g_y[i] = &g_y[i] + &gy_from_se;
            }
        }
        self.spc.backward(&cache.spc, &g_y)
    }
}

impl<F: Float> Parameterized<F> for MultiReceptiveAttention<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.spc.visit_params(&format!("{prefix}.spc"), v);
        self.se.visit_params(&format!("{prefix}.se"), v);
    }
}

/// The full block: two independent attention paths combined by group shuffle.
#[derive(Debug, Clone)]
pub struct GsmaBlock<F> {
    pub mra_v: MultiReceptiveAttention<F>,
    pub mra_t: MultiReceptiveAttention<F>,
    pub shuffle: ShuffleSpec,
    pub order: ShuffleOrder,
}

pub struct GsmaCache<F> {
    v: MraCache<F>,
    t: MraCache<F>,
}

impl<F: Float> GsmaBlock<F> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &GsmaConfig) -> Result<Self> {
        Ok(GsmaBlock {
            mra_v: MultiReceptiveAttention::new(rng, cfg)?,
            mra_t: MultiReceptiveAttention::new(rng, cfg)?,
            shuffle: cfg.shuffle_spec()?,
            order: cfg.shuffle_order,
        })
    }

    /// Both attention paths pinned to identity; forward degenerates to the
    /// pure group shuffle of the inputs.
    pub fn identity<R: Rng>(rng: &mut R, cfg: &GsmaConfig) -> Result<Self> {
        Ok(GsmaBlock {
            mra_v: MultiReceptiveAttention::identity(rng, cfg)?,
            mra_t: MultiReceptiveAttention::identity(rng, cfg)?,
            shuffle: cfg.shuffle_spec()?,
            order: cfg.shuffle_order,
        })
    }

    pub fn forward(&self, f_v: &Array4<F>, f_t: &Array4<F>) -> Result<Array4<F>> {
        if f_v.dim() != f_t.dim() {
            return Err(Error::Shape(format!(
                "modality shapes differ: {:?} vs {:?}",
                f_v.dim(),
                f_t.dim()
            )));
        }
        Ok(match self.order {
            ShuffleOrder::AfterAttention => group_shuffle(
                &self.mra_v.forward(f_v),
                &self.mra_t.forward(f_t),
                &self.shuffle,
            )?,
            ShuffleOrder::BeforeAttention => {
                let s = group_shuffle(f_v, f_t, &self.shuffle)?;
                let c = f_v.dim().1;
                let (h1, h2) = split_channels(&s, c);
                concat_channels(&self.mra_v.forward(&h1), &self.mra_t.forward(&h2))
            }
        })
    }

    pub fn forward_t(&self, f_v: &Array4<F>, f_t: &Array4<F>) -> Result<(Array4<F>, GsmaCache<F>)> {
        if f_v.dim() != f_t.dim() {
            return Err(Error::Shape(format!(
                "modality shapes differ: {:?} vs {:?}",
                f_v.dim(),
                f_t.dim()
            )));
        }
        Ok(match self.order {
            ShuffleOrder::AfterAttention => {
                let (rv, cv) = self.mra_v.forward_t(f_v);
                let (rt, ct) = self.mra_t.forward_t(f_t);
                let out = group_shuffle(&rv, &rt, &self.shuffle)?;
                (out, GsmaCache { v: cv, t: ct })
            }
            ShuffleOrder::BeforeAttention => {
                let s = group_shuffle(f_v, f_t, &self.shuffle)?;
                let c = f_v.dim().1;
                let (h1, h2) = split_channels(&s, c);
                let (r1, cv) = self.mra_v.forward_t(&h1);
                let (r2, ct) = self.mra_t.forward_t(&h2);
                (concat_channels(&r1, &r2), GsmaCache { v: cv, t: ct })
            }
        })
    }

    pub fn backward(&mut self, cache: &GsmaCache<F>, gy: &Array4<F>) -> (Array4<F>, Array4<F>) {
        match self.order {
            ShuffleOrder::AfterAttention => {
                let (gv, gt) = group_shuffle_backward(gy, &self.shuffle).expect("shape fixed");
                (
                    self.mra_v.backward(&cache.v, &gv),
                    self.mra_t.backward(&cache.t, &gt),
                )
            }
            ShuffleOrder::BeforeAttention => {
                let c = gy.dim().1 / 2;
                let (g1, g2) = split_channels(gy, c);
                let gh1 = self.mra_v.backward(&cache.v, &g1);
                let gh2 = self.mra_t.backward(&cache.t, &g2);
                let gs = concat_channels(&gh1, &gh2);
                group_shuffle_backward(&gs, &self.shuffle).expect("shape fixed")
            }
        }
    }
}

impl<F: Float> Parameterized<F> for GsmaBlock<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.mra_v.visit_params(&p("mra_v"), v);
        self.mra_t.visit_params(&p("mra_t"), v);
    }
}

/// Multiplies channel `c` of every spatial position by `w[b, c]`.
fn scale_channels<F: Float>(x: &Array4<F>, w: &Array2<F>) -> Array4<F> {
    let mut y = x.clone();
    for (b, mut img) in y.outer_iter_mut().enumerate() {
        for (c, mut plane) in img.outer_iter_mut().enumerate() {
            let f = w[[b, c]];
            plane.mapv_inplace(|v| v * f);
        }
    }
    y
}

fn softmax_over_branches<F: Float>(w: &Array3<F>) -> Array3<F> {
    let (b, s, c) = w.dim();
    let mut out = Array3::zeros((b, s, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut mx = fl::<F>(f64::NEG_INFINITY);
            for si in 0..s {
                mx = mx.max(w[[bi, si, ci]]);
            }
            let mut z = F::zero();
            for si in 0..s {
                z = z + (w[[bi, si, ci]] - mx).exp();
            }
            for si in 0..s {
                out[[bi, si, ci]] = (w[[bi, si, ci]] - mx).exp() / z;
            }
        }
    }
    out
}

fn softmax_backward_over_branches<F: Float>(y: &Array3<F>, gy: &Array3<F>) -> Array3<F> {
    let (b, s, c) = y.dim();
    let mut gx = Array3::zeros((b, s, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut dot = F::zero();
            for si in 0..s {
                dot = dot + gy[[bi, si, ci]] * y[[bi, si, ci]];
            }
            for si in 0..s {
                gx[[bi, si, ci]] = y[[bi, si, ci]] * (gy[[bi, si, ci]] - dot);
            }
        }
    }
    gx
}
