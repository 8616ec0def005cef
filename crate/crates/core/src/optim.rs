//! Stochastic gradient descent with momentum, plus the cosine rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::fmath;
use crate::matrix::Matrix;
use crate::params::Params;
use crate::{Error, Result};

/// Momentum coefficient shared by the main and the disturbance optimizers.
pub const MOMENTUM: f64 = 0.9;

/// Classic SGD with momentum: v = mu*v + g, p -= lr*v.
pub struct SgdMomentum {
    momentum: f64,
    buffers: Vec<Matrix>,
}

impl SgdMomentum {
    /// Zero-initialized momentum buffers matching `params`.
    pub fn new(params: &Params, momentum: f64) -> Self {
        let buffers = params
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self { momentum, buffers }
    }

    /// Restore from checkpointed buffers; shapes must match `params`.
    pub fn from_buffers(params: &Params, momentum: f64, buffers: Vec<Matrix>) -> Result<Self> {
        if buffers.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} momentum buffers for {} parameters",
                buffers.len(),
                params.len()
            )));
        }
        for (b, p) in buffers.iter().zip(params.values()) {
            if b.shape() != p.shape() {
                return Err(Error::Shape("momentum buffer shape mismatch".into()));
            }
        }
        Ok(Self { momentum, buffers })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn buffers(&self) -> &[Matrix] {
        &self.buffers
    }

    /// One update over all parameters; `grads` is aligned with the parameter
    /// order.
    pub fn step(&mut self, params: &mut Params, grads: &[Matrix], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((buf, p), g) in self.buffers.iter_mut().zip(params.values_mut()).zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::Shape("gradient shape mismatch".into()));
            }
            for ((v, x), &gx) in buf
                .data_mut()
                .iter_mut()
                .zip(p.data_mut().iter_mut())
                .zip(g.data().iter())
            {
                *v = self.momentum * *v + gx;
                *x -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at epoch 0 toward 0 at `total` epochs.
/// There is deliberately no warmup phase: the rate starts at `base`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    assert!(total > 0, "schedule needs at least one epoch");
    let t = (epoch as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + fmath::cos(core::f64::consts::PI * t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> Params {
        let mut p = Params::new();
        p.add("w", Matrix::scalar(v));
        p
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0.004, 0, 30), 0.004);
        assert!((cosine_lr(0.004, 15, 30) - 0.002).abs() < 1e-15);
        assert!(cosine_lr(0.004, 30, 30).abs() < 1e-18);
        assert!(cosine_lr(0.004, 29, 30) < 1e-4);
        for e in 1..30 {
            assert!(cosine_lr(0.004, e, 30) < cosine_lr(0.004, e - 1, 30));
        }
    }

    #[test]
    fn momentum_accumulates_like_hand_computation() {
        let mut params = single_param(1.0);
        let mut opt = SgdMomentum::new(&params, 0.9);
        let g = [Matrix::scalar(0.5)];
        opt.step(&mut params, &g, 0.1).unwrap();
        // v=0.5, p = 1 - 0.1*0.5 = 0.95
        assert!((params.values()[0].item() - 0.95).abs() < 1e-15);
        opt.step(&mut params, &g, 0.1).unwrap();
        // v = 0.9*0.5 + 0.5 = 0.95, p = 0.95 - 0.095 = 0.855
        assert!((params.values()[0].item() - 0.855).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_zero_momentum_is_identity() {
        let mut params = single_param(0.3);
        let mut opt = SgdMomentum::new(&params, 0.9);
        opt.step(&mut params, &[Matrix::scalar(0.0)], 0.5).unwrap();
        assert_eq!(params.values()[0].item(), 0.3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = single_param(0.0);
        let mut opt = SgdMomentum::new(&params, 0.9);
        assert!(opt.step(&mut params, &[], 0.1).is_err());
        assert!(opt.step(&mut params, &[Matrix::zeros(2, 2)], 0.1).is_err());
    }

    #[test]
    fn buffer_round_trip() {
        let mut params = single_param(1.0);
        let mut opt = SgdMomentum::new(&params, 0.9);
        opt.step(&mut params, &[Matrix::scalar(1.0)], 0.1).unwrap();
        let saved: alloc::vec::Vec<Matrix> = opt.buffers().to_vec();
        let restored = SgdMomentum::from_buffers(&params, 0.9, saved).unwrap();
        assert_eq!(restored.buffers()[0].item(), opt.buffers()[0].item());
        assert!(SgdMomentum::from_buffers(&params, 0.9, alloc::vec![]).is_err());
    }
}
