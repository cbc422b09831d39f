//! Dense layer on `(B, features)` activations.

use ndarray::{Array2, Ix1, Ix2};
use rand::Rng;

use super::{init, visit_param, Float, Param, ParamVisitor, Parameterized};

#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// Shape `(out, in)`.
    pub w: Param<F, Ix2>,
    pub b: Param<F, Ix1>,
}

impl<F: Float> Linear<F> {
    pub fn new<R: Rng>(rng: &mut R, inp: usize, out: usize) -> Self {
        Linear {
            w: Param::new(init::kaiming_linear(rng, out, inp)),
            b: Param::new(init::zeros1(out)),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.w.v.t()) + &self.b.v
    }

    pub fn backward(&mut self, x: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
        self.w.g = &self.w.g + &gy.t().dot(x);
        self.b.g = &self.b.g + &gy.sum_axis(ndarray::Axis(0));
        gy.dot(&self.w.v)
    }
}

impl<F: Float> Parameterized<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        visit_param(prefix, "w", &mut self.w, v);
        visit_param(prefix, "b", &mut self.b, v);
    }
}
