//! Central finite-difference verification of analytic gradients.
//!
//! The scalar probe is `L = sum(seed ⊙ forward(x))` with a fixed random
//! `seed`, so `dL/dy = seed` seeds the backward pass and every parameter and
//! input gradient can be compared against `(L(+h) - L(-h)) / 2h`.

use ndarray::Array4;

use super::{Float, ParamRef, Parameterized};

/// Relative error with an absolute floor, so exactly-zero gradients (e.g. a
/// conv bias followed by a mean-removing normalizer) compare as
/// `fd_noise / 1e-3` instead of dividing two rounding errors.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-3)
}

fn probe<F: Float>(y: &Array4<F>, seed: &Array4<F>) -> f64 {
    y.iter()
        .zip(seed.iter())
        .map(|(&a, &b)| a.as_f64() * b.as_f64())
        .sum()
}

fn perturb_param<F: Float>(m: &mut dyn Parameterized<F>, target: usize, idx: usize, d: f64) {
    let mut k = 0usize;
    m.visit_params("", &mut |p: ParamRef<'_, F>| {
        if k == target {
            p.v[idx] = p.v[idx] + F::from_f64(d);
        }
        k += 1;
    });
}

/// Checks every parameter and every input element of a module; returns the
/// maximum relative error between analytic and central-difference gradients.
pub fn check_module<F, M, Fw, Bw>(
    m: &mut M,
    x: &Array4<F>,
    seed: &Array4<F>,
    fwd: Fw,
    bwd: Bw,
    h: f64,
) -> f64
where
    F: Float,
    M: Parameterized<F>,
    Fw: Fn(&M, &Array4<F>) -> Array4<F>,
    Bw: FnOnce(&mut M, &Array4<F>, &Array4<F>) -> Array4<F>,
{
    m.zero_grads();
    let gx = bwd(m, x, seed);

    // snapshot analytic parameter gradients in visit order
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    m.visit_params("", &mut |p: ParamRef<'_, F>| {
        analytic.push(p.g.iter().map(|g| g.as_f64()).collect());
        names.push(p.name.clone());
    });

    let mut max_rel = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            perturb_param(m, pi, ei, h);
            let lp = probe(&fwd(m, x), seed);
            perturb_param(m, pi, ei, -2.0 * h);
            let lm = probe(&fwd(m, x), seed);
            perturb_param(m, pi, ei, h);
            let n = (lp - lm) / (2.0 * h);
            let r = rel_err(a, n);
            if r > max_rel {
                max_rel = r;
            }
        }
    }

    // input gradients
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let flat = xp.as_slice_mut().unwrap();
        let orig = flat[idx];
        flat[idx] = orig + F::from_f64(h);
        let lp = probe(&fwd(m, &xp), seed);
        let flat = xp.as_slice_mut().unwrap();
        flat[idx] = orig - F::from_f64(h);
        let lm = probe(&fwd(m, &xp), seed);
        let flat = xp.as_slice_mut().unwrap();
        flat[idx] = orig;
        let n = (lp - lm) / (2.0 * h);
        let a = gx.as_slice().unwrap()[idx].as_f64();
        let r = rel_err(a, n);
        if r > max_rel {
            max_rel = r;
        }
    }
    max_rel
}
