//! Adam with decoupled weight decay and the epoch-wise cosine schedule.

use super::param::ParamStore;
use crate::error::{ensure, Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub min_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 5e-5,
            total_epochs: 200,
            batch_size: 32,
            min_learning_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be positive"
        );
        ensure!(
            self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate,
            "min_learning_rate must lie in [0, learning_rate]"
        );
        ensure!(
            self.weight_decay >= 0.0,
            "weight_decay must be non-negative"
        );
        ensure!(self.total_epochs >= 1, "total_epochs must be positive");
        ensure!(self.batch_size >= 1, "batch_size must be positive");
        Ok(())
    }
}

/// Cosine-annealed learning rate for `epoch`; epochs past the end stay at the minimum.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> f64 {
    let (lr0, lr_min) = (config.learning_rate, config.min_learning_rate);
    if epoch >= config.total_epochs {
        return lr_min;
    }
    let t = epoch as f64 / config.total_epochs as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One Adam update of every parameter from its accumulated gradient, then
/// clears the gradients.
///
/// Weight decay is decoupled: `value ← value·(1 − lr·wd)` for every parameter.
/// Parameters whose gradient is identically zero keep their moments and step
/// count untouched, so a parameter that takes no part in the loss does not drift.
pub fn adam_step(params: &mut ParamStore, config: &TrainConfig, lr_now: f64) -> Result<()> {
    if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient(bad.name.clone()));
    }
    let decay = 1.0 - lr_now * config.weight_decay;
    for p in params.iter_mut() {
        if config.weight_decay != 0.0 {
            p.value.data_mut().iter_mut().for_each(|x| *x *= decay);
        }
        if p.grad.data().iter().all(|&g| g == 0.0) {
            continue;
        }
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let grad = p.grad.data();
        let m = p.m.data_mut();
        for (mi, &g) in m.iter_mut().zip(grad) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
        }
        let v = p.v.data_mut();
        for (vi, &g) in v.iter_mut().zip(grad) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
        }
        let (m, v) = (p.m.data(), p.v.data());
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] -= lr_now * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    params.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig {
            weight_decay: wd,
            total_epochs: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let grads = [0.3, -5.0, 1e-3];
        s.get_mut(id).grad.data_mut().copy_from_slice(&grads);
        adam_step(&mut s, &cfg(0.0), 1e-3).unwrap();
        for ((&after, before), g) in s.value(id).data().iter().zip([1.0, -2.0, 0.5]).zip(grads) {
            // m̂/√v̂ = g/|g|, so the step is lr·sign(g) up to eps.
            let step = before - after;
            let expect = 1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((step - expect).abs() < 1e-15, "{step} vs {expect}");
        }
        assert_eq!(s.get(id).step_count, 1);
        assert!(s.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::vector(vec![0.25, -3.0]).unwrap())
            .unwrap();
        for _ in 0..3 {
            adam_step(&mut s, &cfg(0.0), 1e-2).unwrap();
        }
        assert_eq!(s.value(id).data(), &[0.25, -3.0]);
    }

    #[test]
    fn only_parameters_with_gradient_move_their_moments() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let b = s.add("b", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        s.get_mut(a).grad.data_mut()[0] = 2.0;
        adam_step(&mut s, &cfg(0.0), 1e-3).unwrap();
        assert!(s.get(a).m.data()[0] != 0.0 && s.get(a).v.data()[0] != 0.0);
        assert_eq!(s.get(b).m.data()[0], 0.0);
        assert_eq!(s.get(b).v.data()[0], 0.0);
        assert_eq!(s.value(b).data()[0], 1.0);
    }

    #[test]
    fn decoupled_weight_decay_scales_values() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![2.0]).unwrap()).unwrap();
        adam_step(&mut s, &cfg(0.5), 0.1).unwrap();
        assert!((s.value(id).data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = ParamStore::new();
        s.add("fine", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let id = s.add("broken", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        s.get_mut(id).grad.data_mut()[0] = f64::NAN;
        match adam_step(&mut s, &cfg(0.0), 1e-3) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "broken"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let c = TrainConfig {
            learning_rate: 1e-3,
            min_learning_rate: 1e-4,
            total_epochs: 20,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0, &c), 1e-3);
        assert_eq!(cosine_lr(20, &c), 1e-4);
        assert_eq!(cosine_lr(25, &c), 1e-4);
        assert!((cosine_lr(10, &c) - 5.5e-4).abs() < 1e-15);
        let d = TrainConfig::default();
        assert_eq!(cosine_lr(0, &d), 0.001);
        assert_eq!(cosine_lr(d.total_epochs, &d), 0.0);
    }

    #[test]
    fn cosine_schedule_is_non_increasing() {
        let c = TrainConfig {
            total_epochs: 37,
            min_learning_rate: 2e-4,
            ..TrainConfig::default()
        };
        for e in 0..40 {
            assert!(cosine_lr(e + 1, &c) <= cosine_lr(e, &c));
        }
    }

    #[test]
    fn validate_rejects_bad_configs() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                min_learning_rate: 0.01,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                total_epochs: 0,
                ..TrainConfig::default()
            },
        ];
        for b in bad {
            assert!(b.validate().is_err());
        }
    }
}
