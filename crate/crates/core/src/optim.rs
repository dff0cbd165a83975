//! Adaptive-moment gradient descent.

use alloc::vec::Vec;

use crate::math;
use crate::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// One moment slot per parameter shape, in the order `step` will receive them.
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `params[i]` pairs with `grads[i]` and slot `i`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= self.lr * mh / (math::sqrt(vh) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::from_vec(vec![1.0, -1.0]);
        let g = Tensor::from_vec(vec![0.5, -2.0]);
        let mut opt = Adam::new(0.01, &[&[2]]);
        opt.step(&mut [&mut p], &[&g]);
        assert!((p.data()[0] - 0.99).abs() < 1e-6);
        assert!((p.data()[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::from_vec(vec![3.0]);
        let mut opt = Adam::new(0.1, &[&[1]]);
        for _ in 0..500 {
            let g = Tensor::from_vec(vec![2.0 * p.data()[0]]);
            opt.step(&mut [&mut p], &[&g]);
        }
        assert!(p.data()[0].abs() < 1e-2);
    }
}
