//! SGD with momentum, weight decay, and polynomial learning-rate decay.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::config::OptimConfig;
use crate::models::{GradSet, Parameterized};

/// Momentum buffers aligned with the model's parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(model: &impl Parameterized) -> Self {
        Self {
            velocity: model
                .params()
                .iter()
                .map(|p| ArrayD::zeros(p.raw_dim()))
                .collect(),
        }
    }

    /// Polynomial decay: lr * (1 - step/total)^power.
    pub fn poly_lr(cfg: &OptimConfig, step: u64, total: u64) -> f64 {
        if total == 0 {
            return cfg.lr;
        }
        let frac = (step as f64 / total as f64).min(1.0);
        cfg.lr * (1.0 - frac).powf(cfg.poly_power)
    }

    /// v = momentum v + g + wd theta; theta -= lr v.
    pub fn step(
        &mut self,
        cfg: &OptimConfig,
        lr: f64,
        model: &mut impl Parameterized,
        grads: &GradSet,
    ) {
        let mut params = model.params_mut();
        debug_assert_eq!(params.len(), grads.0.len());
        for ((param, velocity), grad) in params.iter_mut().zip(&mut self.velocity).zip(&grads.0) {
            ndarray::Zip::from(&mut *velocity)
                .and(&**param)
                .and(grad)
                .for_each(|v, &p, &g| {
                    *v = cfg.momentum * *v + g + cfg.weight_decay * p;
                });
            param.zip_mut_with(velocity, |p, &v| *p -= lr * v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayViewD, ArrayViewMutD, IxDyn};

    struct Scalar(ArrayD<f64>);
    impl Parameterized for Scalar {
        fn param_names(&self) -> Vec<String> {
            vec!["w".into()]
        }
        fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
            vec![self.0.view()]
        }
        fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
            vec![self.0.view_mut()]
        }
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = OptimConfig {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
            poly_power: 0.9,
        };
        let mut model = Scalar(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let mut sgd = Sgd::new(&model);
        let grads = GradSet(vec![ArrayD::from_elem(IxDyn(&[]), 1.0)]);
        sgd.step(&cfg, cfg.lr, &mut model, &grads);
        // v = 1, theta = 1 - 0.1
        assert!((model.0.sum() - 0.9).abs() < 1e-15);
        sgd.step(&cfg, cfg.lr, &mut model, &grads);
        // v = 0.5 + 1 = 1.5, theta = 0.9 - 0.15
        assert!((model.0.sum() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let cfg = OptimConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.1,
            poly_power: 0.9,
        };
        let mut model = Scalar(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let mut sgd = Sgd::new(&model);
        let grads = GradSet(vec![ArrayD::zeros(IxDyn(&[]))]);
        sgd.step(&cfg, cfg.lr, &mut model, &grads);
        assert!((model.0.sum() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn poly_schedule_endpoints() {
        let cfg = OptimConfig::default();
        assert_eq!(Sgd::poly_lr(&cfg, 0, 100), cfg.lr);
        assert_eq!(Sgd::poly_lr(&cfg, 100, 100), 0.0);
        assert!(Sgd::poly_lr(&cfg, 50, 100) < cfg.lr);
        assert_eq!(Sgd::poly_lr(&cfg, 0, 0), cfg.lr);
    }
}
