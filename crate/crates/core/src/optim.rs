//! Adam over flat named tensors.

use crate::denoiser::{to_storage_precision, NamedTensor};
use crate::error::{HdmError, Result};

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(tensors: &[NamedTensor]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: tensors.iter().map(|t| vec![0.0; t.values.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.values.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Buffers (non-trainable tensors) are left untouched; frozen
    /// parameter sets are refused.
    pub fn step(&mut self, tensors: &mut [NamedTensor], grads: &[Vec<f64>], lr: f64, frozen: bool) -> Result<()> {
        if frozen {
            return Err(HdmError::contract("optimizer update on frozen parameters"));
        }
        if grads.len() != tensors.len() || grads.len() != self.m.len() {
            return Err(HdmError::contract("gradient layout does not match parameters"));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(HdmError::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, t) in tensors.iter_mut().enumerate() {
            if !t.trainable {
                continue;
            }
            for (j, val) in t.values.iter_mut().enumerate() {
                let g = grads[i][j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *val = to_storage_precision(*val - update);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr` to `lr * floor` over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let p = step as f64 / (total - 1) as f64;
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f64) -> NamedTensor {
        NamedTensor {
            name: "x".into(),
            shape: vec![1],
            values: vec![v],
            trainable: true,
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut ts = vec![t(3.0)];
        let mut opt = Adam::new(&ts);
        for _ in 0..2000 {
            let g = vec![vec![2.0 * ts[0].values[0]]];
            opt.step(&mut ts, &g, 0.01, false).unwrap();
        }
        assert!(ts[0].values[0].abs() < 1e-2);
    }

    #[test]
    fn frozen_update_is_rejected() {
        let mut ts = vec![t(1.0)];
        let mut opt = Adam::new(&ts);
        assert!(opt.step(&mut ts, &[vec![1.0]], 0.1, true).is_err());
        assert_eq!(ts[0].values[0], 1.0);
    }
}
