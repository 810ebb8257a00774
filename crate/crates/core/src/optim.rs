//! First-order optimizers over [`ParamSet`]s. Optimizer state is a `ParamSet` too, so it
//! serializes through the same checkpoint container as the weights.

use ndarray::{Array2, Zip};

use crate::autograd::ParamSet;

/// Global L2 norm of a gradient list.
pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

fn zeros_like(params: &ParamSet, prefix: &str) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, v) in params.iter() {
        out.push(format!("{prefix}.{name}"), Array2::zeros(v.dim()));
    }
    out
}

/// Heavy-ball momentum with a cosine-decayed learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum {
    pub lr: f64,
    pub beta: f64,
    pub total_steps: usize,
    pub step: usize,
    pub velocity: ParamSet,
}

impl Momentum {
    pub fn new(params: &ParamSet, lr: f64, beta: f64, total_steps: usize) -> Self {
        Self {
            lr,
            beta,
            total_steps,
            step: 0,
            velocity: zeros_like(params, "velocity"),
        }
    }

    /// Learning rate at the current step: `lr · ½(1 + cos(π · step / total))`.
    pub fn current_lr(&self) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let frac = (self.step as f64 / self.total_steps as f64).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        let lr = self.current_lr();
        let beta = self.beta;
        for (i, g) in grads.iter().enumerate() {
            let v = self.velocity.get_mut(i);
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = beta * *v + g);
            let v = self.velocity.get(i).clone();
            Zip::from(params.get_mut(i)).and(&v).for_each(|p, &v| *p -= lr * v);
        }
        self.step += 1;
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    pub first: ParamSet,
    pub second: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros_like(params, "m"),
            second: zeros_like(params, "v"),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
            Zip::from(self.first.get_mut(i))
                .and(g)
                .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            Zip::from(self.second.get_mut(i))
                .and(g)
                .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = self.first.get(i);
            let v = self.second.get(i);
            Zip::from(params.get_mut(i))
                .and(m)
                .and(v)
                .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_schedule_endpoints() {
        let p = {
            let mut p = ParamSet::new();
            p.push("w", array![[1.0]]);
            p
        };
        let mut m = Momentum::new(&p, 0.1, 0.9, 10);
        assert!((m.current_lr() - 0.1).abs() < 1e-15);
        m.step = 10;
        assert!(m.current_lr().abs() < 1e-15);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamSet::new();
        p.push("w", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let g = vec![p.get(0).clone()];
            opt.update(&mut p, &g);
        }
        assert!(p.get(0).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![array![[3.0, 4.0]]];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
