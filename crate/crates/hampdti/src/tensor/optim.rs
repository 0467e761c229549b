//! Adaptive-moment parameter updates.

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first/second moment accumulators per parameter plus a
/// step counter. Parameter order is fixed at construction.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    params: Vec<Tensor>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, cfg: AdamConfig) -> Adam {
        let first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            cfg,
            step: 0,
            params,
            first,
            second,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (k, p) in self.params.iter().enumerate() {
            let g = p.grad().ok_or(TensorError::MissingGradient(k))?;
            let mut data = p.to_vec();
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..data.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            p.set_data(&data);
            p.zero_grad();
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
