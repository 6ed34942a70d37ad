//! SGD with momentum and a step-drop learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Iterations at which the learning rate is multiplied by `drop_factor`.
    pub drops: Vec<usize>,
    pub drop_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            drops: Vec::new(),
            drop_factor: 0.5,
        }
    }
}

impl SgdConfig {
    /// Learning rate in effect at iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let n = self.drops.iter().filter(|&&d| d <= iter).count();
        self.lr * self.drop_factor.powi(n as i32)
    }
}

/// `v <- mu * v - lr * g; p <- p + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f64>>,
    iter: usize,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
            iter: 0,
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Iterations taken so far.
    pub fn iter(&self) -> usize {
        self.iter
    }

    /// Learning rate the next step will use.
    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.iter)
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::MissingGrads {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for ((p, gr), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != gr.shape() || v.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), gr.shape()),
                });
            }
        }
        let lr = self.lr();
        let mu = self.config.momentum;
        for ((p, gr), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(gr.data()).zip(v.iter_mut()) {
                *vv = mu * *vv - lr * gv;
                *pv += *vv;
            }
        }
        self.iter += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            ..Default::default()
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Sgd::new(cfg(0.1, 0.0));
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        assert!((p.item().unwrap() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Sgd::new(cfg(0.1, 0.9));
        for _ in 0..2 {
            opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        }
        assert!((p.item().unwrap() + 0.29).abs() < 1e-12);
    }

    #[test]
    fn lr_halves_at_drop_points() {
        let c = SgdConfig {
            drops: vec![5, 8],
            ..cfg(0.4, 0.0)
        };
        assert_eq!(c.lr_at(4), 0.4);
        assert_eq!(c.lr_at(5), c.lr_at(4) / 2.0);
        assert_eq!(c.lr_at(8), c.lr_at(7) / 2.0);
        assert_eq!(c.lr_at(100), 0.1);
    }

    #[test]
    fn missing_grads_error() {
        let mut p = Tensor::scalar(0.0);
        let mut q = Tensor::scalar(0.0);
        let mut opt = Sgd::new(cfg(0.1, 0.0));
        let err = opt.step(&mut [&mut p, &mut q], &[Tensor::scalar(1.0)]);
        assert_eq!(err, Err(Error::MissingGrads { expected: 2, got: 1 }));
    }

    #[test]
    fn quadratic_bowl_decreases() {
        // f(p) = 0.5 * sum(a_i p_i^2), curvature max(a) = 3, stable for lr < 2/3.
        let a = [1.0, 3.0, 0.5];
        let f = |p: &Tensor| 0.5 * p.data().iter().zip(a).map(|(x, c)| c * x * x).sum::<f64>();
        for lr in [0.01, 0.1, 0.5, 0.6] {
            let mut p = Tensor::new([3], vec![1.0, -2.0, 0.7]).unwrap();
            let before = f(&p);
            let grad = Tensor::new([3], p.data().iter().zip(a).map(|(x, c)| c * x).collect()).unwrap();
            Sgd::new(cfg(lr, 0.0)).step(&mut [&mut p], &[grad]).unwrap();
            assert!(f(&p) < before, "lr {lr}");
        }
    }
}
