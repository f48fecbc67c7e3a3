//! Adam and the linear warmup / linear decay learning-rate schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup: u64,
    /// Step at which the rate reaches zero.
    pub total: u64,
}

impl LinearSchedule {
    /// Rate for 1-based step `s`: `lr · s / warmup` while `s ≤ warmup`, then
    /// linear decay to 0 at `total`.
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup > 0 && step <= self.warmup {
            return self.base_lr * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        self.base_lr * (self.total - step) as f64 / span as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                context: "optimizer state",
                expected: self.m.len(),
                actual: params.len().min(grads.len()),
            });
        }
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Dimension {
                    context: "parameter gradient",
                    expected: p.rows() * p.cols(),
                    actual: g.rows() * g.cols(),
                });
            }
            for (((x, &dg), mm), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * dg;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * dg * dg;
                if lr != 0.0 {
                    *x -= lr * (*mm / c1) / (libm::sqrt(*vv / c2) + self.eps);
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
    fn warmup_is_exactly_linear() {
        let s = LinearSchedule {
            base_lr: 1e-3,
            warmup: 50,
            total: 150,
        };
        for step in 1..=50u64 {
            assert_eq!(s.lr(step), 1e-3 * step as f64 / 50.0);
        }
        assert_eq!(s.lr(100), 1e-3 * 0.5);
        assert_eq!(s.lr(150), 0.0);
        assert_eq!(s.lr(400), 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = [Matrix::scalar(3.0)];
        let mut opt = Adam::new([(1, 1)]);
        for _ in 0..2000 {
            let g = [Matrix::scalar(2.0 * x[0].get(0, 0))];
            opt.update(&mut x, &g, 0.05).unwrap();
        }
        assert!(x[0].get(0, 0).abs() < 1e-2);
    }
}
