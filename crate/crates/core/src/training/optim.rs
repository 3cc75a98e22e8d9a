//! Decoupled-weight-decay Adam, linear learning-rate decay and global
//! gradient-norm clipping.

use crate::model::{is_decayed, Params};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Learning rate for update `step` (0-based) of `total`, decaying linearly
/// from `base` to 0 without warm-up.
pub fn linear_schedule(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (total.saturating_sub(step)) as f64 / total as f64
}

pub fn grad_norm(grads: &Params<f32>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&g| f64::from(g) * f64::from(g))
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Params<f32>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / (norm + 1e-6)) as f32;
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

pub struct AdamW {
    weight_decay: f64,
    first: Params<f32>,
    second: Params<f32>,
    decayed: Vec<bool>,
    steps: i32,
}

impl AdamW {
    pub fn new(params: &Params<f32>, weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            first: params.zeros_like(),
            second: params.zeros_like(),
            decayed: params.tensors().iter().map(|t| is_decayed(&t.name)).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - BETA1.powi(self.steps);
        let c2 = 1.0 - BETA2.powi(self.steps);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let (b1, b2, eps) = (BETA1 as f32, BETA2 as f32, EPSILON as f32);
        let shrink = (1.0 - lr * self.weight_decay) as f32;

        let grads = grads.tensors();
        for ((((p, g), m), v), &decayed) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
            .zip(&self.decayed)
        {
            for (((x, &gr), mo), ve) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                if decayed {
                    *x *= shrink;
                }
                *mo = b1 * *mo + (1.0 - b1) * gr;
                *ve = b2 * *ve + (1.0 - b2) * gr * gr;
                *x -= step_size * *mo / (ve.sqrt() / c2_sqrt + eps);
            }
        }
    }
}
