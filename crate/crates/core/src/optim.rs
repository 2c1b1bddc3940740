//! First-order parameter updates.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    #[default]
    Sgd,
    Adam,
}

/// Stateful optimizer over a fixed parameter layout.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, params)),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        match self {
            Optimizer::Sgd { lr } => {
                if *lr != 0.0 {
                    params.axpy(-*lr, grads);
                }
            }
            Optimizer::Adam(adam) => adam.step(params, grads),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.t += 1;
        if self.lr == 0.0 {
            return;
        }
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> ModelParams {
        ModelParams::new(vec!["x".into()], vec![Tensor::new(&[1], vec![x])]).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &p);
        opt.step(&mut p, &[Tensor::new(&[1], vec![3.0])]);
        assert!((p.tensors()[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = scalar(5.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, &p);
        for _ in 0..2000 {
            let g = p.tensors()[0].clone();
            opt.step(&mut p, &[g]);
        }
        assert!(p.tensors()[0].data()[0].abs() < 1e-2);
    }

    #[test]
    fn zero_rate_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = scalar(0.3);
            let mut opt = Optimizer::new(kind, 0.0, &p);
            opt.step(&mut p, &[Tensor::new(&[1], vec![1e9])]);
            assert_eq!(p, scalar(0.3));
        }
    }
}
