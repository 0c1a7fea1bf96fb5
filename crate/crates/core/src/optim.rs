//! Adam with classic (additive) L2 weight decay.

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Moments sized for `params`; betas and epsilon at the usual
    /// 0.9 / 0.999 / 1e-8.
    pub fn new(params: &ParamStore<T>, lr: T, weight_decay: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// One update from the gradients currently stored in `params`.
    /// `grad + weight_decay * value` feeds the moments for parameters that
    /// take decay.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        assert_eq!(params.len(), self.first.len(), "optimizer built for another store");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let wd = if p.decay { self.weight_decay } else { T::zero() };
            let md = m.data_mut();
            let vd = v.data_mut();
            let skip = self.lr == T::zero();
            for (i, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g + wd * *x;
                md[i] = b1 * md[i] + (T::one() - b1) * g;
                vd[i] = b2 * vd[i] + (T::one() - b2) * g * g;
                if skip {
                    continue;
                }
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.add(&format!("p{i}"), Tensor::scalar(v), true);
        }
        s
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = store(&[0.5, -2.0]);
        let mut adam = AdamState::new(&s, 1e-4, 0.0);
        adam.step(&mut s);
        assert_eq!(s.get(0).value.data(), &[0.5]);
        assert_eq!(s.get(1).value.data(), &[-2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[1.0]);
        s.get_mut(0).grad = Tensor::scalar(1.0);
        let mut adam = AdamState::new(&s, 1e-4, 0.0);
        adam.step(&mut s);
        // mhat = 1, vhat = 1 -> delta = lr / (1 + eps)
        let want = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((s.get(0).value.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn identical_parameters_follow_identical_paths() {
        let mut s = store(&[0.3, 0.3]);
        let mut adam = AdamState::new(&s, 1e-2, 1e-8);
        for k in 0..20 {
            let g = (k as f64 * 0.7).sin();
            s.get_mut(0).grad = Tensor::scalar(g);
            s.get_mut(1).grad = Tensor::scalar(g);
            adam.step(&mut s);
        }
        assert_eq!(s.get(0).value, s.get(1).value);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut s = store(&[0.1, -0.0, 7.25]);
        for i in 0..3 {
            s.get_mut(i).grad = Tensor::scalar(-1.5 + i as f64);
        }
        let before = s.clone();
        let mut adam = AdamState::new(&s, 0.0, 1e-8);
        for _ in 0..5 {
            adam.step(&mut s);
        }
        for i in 0..3 {
            assert_eq!(s.get(i).value.data()[0].to_bits(), before.get(i).value.data()[0].to_bits());
        }
    }

    #[test]
    fn weight_decay_only_where_enabled() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::scalar(1.0), true);
        s.add("bn", Tensor::scalar(1.0), false);
        let mut adam = AdamState::new(&s, 1e-3, 0.1);
        adam.step(&mut s);
        assert!(s.get(0).value.data()[0] < 1.0);
        assert_eq!(s.get(1).value.data()[0], 1.0);
    }
}
