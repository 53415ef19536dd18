//! Heavy-ball momentum SGD and the cosine learning-rate schedule.

use super::{Scalar, Tensor};

/// Optimizer state: one velocity buffer per parameter, updated as
/// `v <- m*v + g`, `theta <- theta - lr*v`.
pub struct SgdMomentum<T: Scalar> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<Vec<T>>,
    pub step_count: usize,
    pub total_steps: usize,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(learning_rate: f64, momentum: f64, total_steps: usize) -> Self {
        assert!(learning_rate >= 0.0, "learning_rate >= 0");
        assert!((0.0..1.0).contains(&momentum), "momentum in [0,1)");
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: Vec::new(),
            step_count: 0,
            total_steps,
        }
    }

    /// Apply one update to every parameter that has a gradient. Parameters
    /// without gradients keep their velocity decay only.
    pub fn step(&mut self, params: &[Tensor<T>]) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::ZERO; p.numel()]).collect();
        }
        let m = T::from_f64(self.momentum);
        let lr = T::from_f64(self.learning_rate);
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            debug_assert_eq!(v.len(), p.numel());
            let grad = p.grad();
            let mut vals = p.values_mut();
            match grad {
                Some(g) => {
                    for i in 0..v.len() {
                        v[i] = m * v[i] + g[i];
                        vals[i] = vals[i] - lr * v[i];
                    }
                }
                None => {
                    for (vi, val) in v.iter_mut().zip(vals.iter_mut()) {
                        *vi = m * *vi;
                        *val = *val - lr * *vi;
                    }
                }
            }
        }
        self.step_count += 1;
    }

    pub fn zero_grad(&self, params: &[Tensor<T>]) {
        for p in params {
            p.zero_grad();
        }
    }
}

/// Cosine schedule: `lr0 * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    assert!(step <= total, "cosine_lr step <= total");
    assert!(total > 0, "cosine_lr total > 0");
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}
