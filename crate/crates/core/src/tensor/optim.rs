//! Momentum SGD and Adam over a flat list of parameter tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Piecewise-constant learning rate: `base · factor^(decays passed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// Zero-based epochs at which the rate is multiplied by `factor`.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule { base, decay_epochs: Vec::new(), factor: 1.0 }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Classic L2 weight decay folded into the gradient before momentum.
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        OptimizerKind::Sgd { momentum, weight_decay }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    /// Momentum (SGD) or first moment (Adam), one per parameter.
    first: Vec<Tensor<T>>,
    /// Second moment (Adam only).
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule) -> Self {
        OptimizerState { kind, schedule, first: Vec::new(), second: Vec::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn ensure_buffers(&mut self, params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(Tensor::zeros_like).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = params.iter().map(Tensor::zeros_like).collect();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params).any(|(b, p)| b.shape() != p.shape())
        {
            return Err(Error::shape("optimizer", "parameter set changed between steps"));
        }
        Ok(())
    }

    /// One update at the schedule's rate for `epoch`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], epoch: usize) -> Result<()> {
        let lr = self.schedule.at_epoch(epoch);
        self.step_with_lr(params, grads, lr)
    }

    pub fn step_with_lr(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        self.ensure_buffers(params, grads)?;
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let d = gv + wd * *pv;
                        *vv = mu * *vv + d;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = T::lit(1.0 - beta1.powi(t));
                let c2 = T::lit(1.0 - beta2.powi(t));
                let (b1, b2, eps, lr) = (T::lit(beta1), T::lit(beta2), T::lit(eps), T::lit(lr));
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((pv, &gv), (mv, vv)) in it {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::sgd(0.9, 0.0), OptimizerKind::adam()] {
            let mut opt = OptimizerState::<f32>::new(kind, LrSchedule::constant(0.1));
            let mut p = vec![Tensor::from_fn([3], |i| i as f32)];
            let before = p.clone();
            opt.step(&mut p, &[Tensor::zeros([3])], 0).unwrap();
            assert_eq!(p, before);
            assert_eq!(opt.step_count(), 1);
        }
    }

    #[test]
    fn plain_sgd_subtracts_gradient() {
        let mut opt = OptimizerState::<f64>::new(OptimizerKind::sgd(0.0, 0.0), LrSchedule::constant(1.0));
        let mut p = vec![Tensor::new([2], vec![1.0, 2.0]).unwrap()];
        opt.step(&mut p, &[Tensor::new([2], vec![0.5, -1.0]).unwrap()], 0).unwrap();
        assert_eq!(p[0].data(), &[0.5, 3.0]);
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let mut opt = OptimizerState::<f64>::new(OptimizerKind::sgd(0.9, 0.5), LrSchedule::constant(0.1));
        let mut p = vec![Tensor::scalar(1.0)];
        let g = [Tensor::scalar(1.0)];
        opt.step(&mut p, &g, 0).unwrap();
        // d = 1 + 0.5·1 = 1.5; v = 1.5; p = 1 − 0.15
        assert!((p[0].data()[0] - 0.85).abs() < 1e-12);
        opt.step(&mut p, &g, 0).unwrap();
        // d = 1 + 0.425 = 1.425; v = 1.35 + 1.425 = 2.775; p = 0.85 − 0.2775
        assert!((p[0].data()[0] - 0.5725).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_quadratic() {
        // Scalar simulation of Adam on f(p) = p² from p = 1.
        let mut oracle = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * oracle.0;
            oracle.1 = 0.9 * oracle.1 + 0.1 * g;
            oracle.2 = 0.999 * oracle.2 + 0.001 * g * g;
            let mhat = oracle.1 / (1.0 - 0.9f64.powi(t));
            let vhat = oracle.2 / (1.0 - 0.999f64.powi(t));
            oracle.0 -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            expected.push(oracle.0);
        }

        let mut opt = OptimizerState::<f64>::new(OptimizerKind::adam(), LrSchedule::constant(0.1));
        let mut p = vec![Tensor::scalar(1.0)];
        let mut last = 1.0f64;
        for want in expected {
            let g = [Tensor::scalar(2.0 * p[0].data()[0])];
            opt.step(&mut p, &g, 0).unwrap();
            let now = p[0].data()[0];
            assert!((now - want).abs() < 1e-12);
            assert!(now.abs() < last.abs());
            last = now;
        }
    }

    #[test]
    fn schedule_decays() {
        let s = LrSchedule { base: 1e-3, decay_epochs: vec![5, 10], factor: 0.1 };
        assert_eq!(s.at_epoch(0), 1e-3);
        assert_eq!(s.at_epoch(4), 1e-3);
        assert!((s.at_epoch(5) - 1e-4).abs() < 1e-18);
        assert!((s.at_epoch(14) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = OptimizerState::<f32>::new(OptimizerKind::adam(), LrSchedule::constant(0.1));
        let mut p = vec![Tensor::zeros([2])];
        assert!(opt.step(&mut p, &[Tensor::zeros([3])], 0).is_err());
        assert!(opt.step(&mut p, &[], 0).is_err());
    }
}
