//! Group normalization (batch-size independent, identical in train and eval).

use ndarray::{s, Array1, Array2, Array4, Ix1};

use super::{fl, init, visit_param, Float, Param, ParamVisitor, Parameterized};

#[derive(Debug, Clone)]
pub struct GroupNorm<F> {
    pub gamma: Param<F, Ix1>,
    pub beta: Param<F, Ix1>,
    pub groups: usize,
    pub eps: f64,
}

/// Per-(image, group) statistics saved by the forward pass.
#[derive(Debug, Clone)]
pub struct GnCache<F> {
    mean: Array2<F>,
    rstd: Array2<F>,
}

/// Largest divisor of `c` that is ≤ 8; keeps groups valid at any toy width.
pub fn auto_groups(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

impl<F: Float> GroupNorm<F> {
    pub fn new(channels: usize) -> Self {
        let groups = auto_groups(channels);
        GroupNorm {
            gamma: Param::new(init::ones1(channels)),
            beta: Param::new(init::zeros1(channels)),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, GnCache<F>) {
        let (bsz, c, h, w) = x.dim();
        let gs = c / self.groups;
        let n = fl::<F>((gs * h * w) as f64);
        let mut y = x.clone();
        let mut mean = Array2::zeros((bsz, self.groups));
        let mut rstd = Array2::zeros((bsz, self.groups));
        for b in 0..bsz {
            for g in 0..self.groups {
                let sl = s![b, g * gs..(g + 1) * gs, .., ..];
                let xg = x.slice(sl);
                let m = xg.sum() / n;
                let var = xg.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / n;
                let r = F::one() / (var + fl(self.eps)).sqrt();
                mean[[b, g]] = m;
                rstd[[b, g]] = r;
                let mut yg = y.slice_mut(sl);
                for (ci, mut plane) in yg.outer_iter_mut().enumerate() {
                    let ga = self.gamma.v[g * gs + ci];
                    let be = self.beta.v[g * gs + ci];
                    plane.mapv_inplace(|v| (v - m) * r * ga + be);
                }
            }
        }
        (y, GnCache { mean, rstd })
    }

    pub fn backward(&mut self, x: &Array4<F>, cache: &GnCache<F>, gy: &Array4<F>) -> Array4<F> {
        let (bsz, c, h, w) = x.dim();
        let gs = c / self.groups;
        let n = fl::<F>((gs * h * w) as f64);
        let mut gx = Array4::zeros((bsz, c, h, w));
        let mut ggamma = Array1::<F>::zeros(c);
        let mut gbeta = Array1::<F>::zeros(c);
        for b in 0..bsz {
            for g in 0..self.groups {
                let m = cache.mean[[b, g]];
                let r = cache.rstd[[b, g]];
                // xhat = (x - m) * r ; dxhat = gy * gamma
                // dx = r/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                let mut sum_dxh = F::zero();
                let mut sum_dxh_xh = F::zero();
                for ci in 0..gs {
                    let ch = g * gs + ci;
                    let ga = self.gamma.v[ch];
                    let xg = x.slice(s![b, ch, .., ..]);
                    let gg = gy.slice(s![b, ch, .., ..]);
                    for (&xv, &gv) in xg.iter().zip(gg.iter()) {
                        let xh = (xv - m) * r;
                        let dxh = gv * ga;
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh;
                        ggamma[ch] = ggamma[ch] + gv * xh;
                        gbeta[ch] = gbeta[ch] + gv;
                    }
                }
                for ci in 0..gs {
                    let ch = g * gs + ci;
                    let ga = self.gamma.v[ch];
                    let xg = x.slice(s![b, ch, .., ..]);
                    let gg = gy.slice(s![b, ch, .., ..]);
                    let mut out = gx.slice_mut(s![b, ch, .., ..]);
                    for ((&xv, &gv), o) in xg.iter().zip(gg.iter()).zip(out.iter_mut()) {
                        let xh = (xv - m) * r;
                        let dxh = gv * ga;
                        *o = r / n * (n * dxh - sum_dxh - xh * sum_dxh_xh);
                    }
                }
            }
        }
        self.gamma.g = &self.gamma.g + &ggamma;
        self.beta.g = &self.beta.g + &gbeta;
        gx
    }
}

impl<F: Float> Parameterized<F> for GroupNorm<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        visit_param(prefix, "gamma", &mut self.gamma, v);
        visit_param(prefix, "beta", &mut self.beta, v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizes_per_group() {
        let gn = GroupNorm::<f64>::new(4);
        assert_eq!(gn.groups, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_simple_fn((2, 4, 5, 5), || rng.gen_range(-2.0..2.0));
        let (y, _) = gn.forward(&x);
        for b in 0..2 {
            for g in 0..4 {
                let yg = y.slice(s![b, g..g + 1, .., ..]);
                let m: f64 = yg.sum() / 25.0;
                let v: f64 = yg.iter().map(|&e| (e - m) * (e - m)).sum::<f64>() / 25.0;
                assert!(m.abs() < 1e-10);
                assert!((v - 1.0).abs() < 1e-3); // eps shifts variance slightly
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gn = GroupNorm::<f64>::new(6);
        gn.gamma.v.mapv_inplace(|_| rng.gen_range(0.5..1.5));
        gn.beta.v.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        let x = Array::from_shape_simple_fn((2, 6, 4, 4), || rng.gen_range(-1.0..1.0));
        let seed = Array::from_shape_simple_fn((2, 6, 4, 4), || rng.gen_range(-1.0..1.0));
        let max_rel = gradcheck::check_module(
            &mut gn,
            &x,
            &seed,
            |m, x| m.forward(x).0,
            |m, x, gy| {
                let (_, cache) = m.forward(x);
                m.backward(x, &cache, gy)
            },
            1e-6,
        );
        assert!(max_rel < 1e-6, "rel err {max_rel}");
    }
}
