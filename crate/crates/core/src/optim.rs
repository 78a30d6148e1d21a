//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer settings. The learning rate decays linearly from `lr` to
/// `lr * final_lr_ratio` over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "one")]
    pub final_lr_ratio: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-2,
            final_lr_ratio: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(param("learning rate must be finite and >= 0"));
        }
        if !(self.final_lr_ratio >= 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(param("final_lr_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn build(&self, n_params: usize) -> Optimizer {
        match self.kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(n_params, self.lr)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr: self.lr },
        }
    }

    /// Learning rate at iteration `k` of `total`.
    pub fn lr_at(&self, k: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let frac = k as f64 / total as f64;
        self.lr * (1.0 - (1.0 - self.final_lr_ratio) * frac)
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Adam(a) => a.lr = lr,
            Optimizer::Sgd { lr: l } => *l = lr,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        match self {
            Optimizer::Adam(a) => a.step(params, grads),
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= *lr * g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = vec![1.0, 2.0];
        let mut opt = OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 0.0,
            final_lr_ratio: 1.0,
        }
        .build(2);
        opt.step(&mut p, &[5.0, -3.0]);
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn linear_decay() {
        let c = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 1.0,
            final_lr_ratio: 0.1,
        };
        assert_eq!(c.lr_at(0, 10), 1.0);
        assert!((c.lr_at(5, 10) - 0.55).abs() < 1e-15);
    }
}
