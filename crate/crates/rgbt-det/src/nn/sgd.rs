//! Momentum SGD with decoupled-from-nothing classic weight decay.

use std::collections::HashMap;

use super::{Float, ParamRef, Parameterized};

pub struct Sgd<F> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<F>>,
}

impl<F: Float> Sgd<F> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// `v <- mu*v + (g + wd*p); p <- p - lr*v`
    pub fn step<M: Parameterized<F>>(&mut self, model: &mut M) {
        let lr = F::from_f64(self.lr);
        let mu = F::from_f64(self.momentum);
        let wd = F::from_f64(self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params("", &mut |p: ParamRef<'_, F>| {
            let vel = velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![F::zero(); p.v.len()]);
            for ((vi, pv), gv) in vel.iter_mut().zip(p.v.iter_mut()).zip(p.g.iter()) {
                *vi = mu * *vi + (*gv + wd * *pv);
                *pv = *pv - lr * *vi;
            }
        });
    }

    /// Velocity buffers, exposed so training state can be checkpointed.
    pub fn state(&self) -> &HashMap<String, Vec<F>> {
        &self.velocity
    }

    pub fn load_state(&mut self, state: HashMap<String, Vec<F>>) {
        self.velocity = state;
    }
}
