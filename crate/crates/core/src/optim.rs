//! Adam with global-norm gradient clipping.

use crate::params::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(0.25),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Param<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.value().shape()), Tensor::zeros(p.value().shape())))
            .unzip();
        Self { cfg, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; `None` (or a
    /// frozen parameter) leaves that parameter and its moments untouched.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut [&mut Param<T>], grads: &[Option<Tensor<T>>]) -> f64 {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let norm = grads
            .iter()
            .zip(params.iter())
            .filter(|(_, p)| p.trainable())
            .filter_map(|(g, _)| g.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::of(1.0 - b1.powi(t));
        let bc2 = T::of(1.0 - b2.powi(t));
        let (b1, b2) = (T::of(b1), T::of(b2));
        let (lr, eps, clip) = (T::of(self.cfg.lr), T::of(self.cfg.eps), T::of(clip));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            if !p.trainable() {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value_mut().data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] * clip;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::<f64>::new("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                clip_norm: None,
                ..Default::default()
            },
            [&p],
        );
        let g = Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap();
        adam.step(&mut [&mut p], &[Some(g)]);
        let w = p.value().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameter_unchanged() {
        let mut p = Param::<f64>::new("w", Tensor::from_f64(&[1], &[0.5]).unwrap());
        p.set_trainable(false);
        let before = p.value().clone();
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Some(Tensor::scalar(1.0))]);
        }
        assert_eq!(p.value(), &before);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut p = Param::<f64>::zeros("w", &[2]);
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        let norm = adam.step(&mut [&mut p], &[Some(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap())]);
        assert_eq!(norm, 5.0);
    }
}
