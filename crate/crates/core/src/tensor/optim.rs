//! Adaptive-moment parameter updates.

use super::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        // GAN-conventional moments: beta1 0.5 keeps the minimax game stable.
        Adam {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    /// One in-place update of `param` from `grad`.
    pub fn step(&self, param: &mut Tensor, grad: &[f64], state: &mut AdamState) {
        let n = param.data().len();
        debug_assert_eq!(grad.len(), n);
        if state.m.len() != n {
            state.m = vec![0.0; n];
            state.v = vec![0.0; n];
            state.t = 0;
        }
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        let data = param.data_mut();
        for i in 0..n {
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * grad[i];
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = state.m[i] / bc1;
            let vhat = state.v[i] / bc2;
            data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::filled(Shape::new(1, 1, 2, 2), 0.7);
        let before = p.clone();
        let mut st = AdamState::default();
        let adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut p, &[0.0; 4], &mut st);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        let mut st = AdamState::default();
        let adam = Adam::default();
        for _ in 0..100 {
            adam.step(&mut p, &[2.5], &mut st);
        }
        assert!(p.item() < 1.0);

        let mut q = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        let mut st = AdamState::default();
        for _ in 0..100 {
            adam.step(&mut q, &[-2.5], &mut st);
        }
        assert!(q.item() > 1.0);
    }

    #[test]
    fn single_step_decreases_quadratic() {
        // f(w) = w^2 from w = 1; grad = 2w.
        let mut w = Tensor::scalar(1.0);
        let mut st = AdamState::default();
        let adam = Adam::default();
        let f0 = w.item() * w.item();
        let g = 2.0 * w.item();
        adam.step(&mut w, &[g], &mut st);
        let f1 = w.item() * w.item();
        assert!(f1 < f0, "f went {f0} -> {f1}");
    }
}
