use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient of every parameter that is not
    /// decay-exempt.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with moment buffers keyed by parameter position.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to `params[i]`; frozen parameters and
    /// missing gradients are skipped.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::shape("optimizer state belongs to a different parameter list"));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!("gradient of {} has shape {:?}", p.name, g.shape())));
            }
            let decay = !p.decay_exempt && c.weight_decay != 0.0;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let mut gj = g.data()[j];
                if decay {
                    gj += wd * *w;
                }
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate at `epoch` (zero-based) under per-epoch exponential decay.
pub fn learning_rate(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        assert_eq!(learning_rate(0.001, 0.99, 0), 0.001);
        assert!((learning_rate(0.001, 0.99, 10) - 0.000904382075008804).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = Parameter::<f64>::new("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        adam.step(&mut [&mut p], &[Some(g)], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.value.data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn decay_skips_exempt_parameters() {
        let w0 = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let g = Tensor::new(vec![3], vec![0.01, 0.02, -0.03]).unwrap();
        let run = |wd: f64, exempt: bool| {
            let mut p = Parameter::new("p", w0.clone());
            p.decay_exempt = exempt;
            let mut adam = Adam::new(AdamConfig {
                weight_decay: wd,
                ..Default::default()
            });
            adam.step(&mut [&mut p], &[Some(g.clone())], 0.01).unwrap();
            adam.step(&mut [&mut p], &[Some(g.clone())], 0.01).unwrap();
            p.value
        };
        assert_eq!(run(0.5, true), run(0.0, true));
        assert_ne!(run(0.5, false), run(0.0, false));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = Parameter::new("p", Tensor::full(&[2], 1.0));
        p.trainable = false;
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], &[Some(Tensor::full(&[2], 1.0))], 0.1).unwrap();
        assert_eq!(p.value.data(), &[1.0, 1.0]);
    }
}
