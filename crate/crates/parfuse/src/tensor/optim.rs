//! AdamW with decoupled weight decay, plus the warm-up/cosine LR schedule.

use crate::error::{Error, Result};
use crate::tensor::nn::Parameter;

pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, betas: (f64, f64)) -> Result<AdamW> {
        if lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::config("weight decay must be >= 0"));
        }
        Ok(AdamW {
            lr,
            weight_decay,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One update over all parameters, reading each parameter's stored
    /// gradient. Decay is decoupled: `p <- p * (1 - lr * wd) - lr * m^ / (sqrt(v^) + eps)`.
    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::usage("optimizer state does not match parameter list"));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let decay = 1.0 - self.lr * self.weight_decay;

        for (i, p) in params.iter().enumerate() {
            let grad = p
                .grad()
                .ok_or_else(|| Error::usage(format!("parameter {} has no gradient", p.name())))?;
            if grad.len() != p.len() {
                return Err(Error::usage(format!(
                    "gradient length mismatch for {}",
                    p.name()
                )));
            }
            let mut data = p.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// Linear warm-up followed by single-cycle cosine annealing.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.warmup_epochs > 0 && epoch < self.warmup_epochs {
            let t = (epoch + 1) as f64 / self.warmup_epochs as f64;
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * t;
        }
        let span = self.total_epochs.saturating_sub(self.warmup_epochs);
        if span == 0 {
            return self.base_lr;
        }
        let progress = (epoch - self.warmup_epochs) as f64 / span as f64;
        self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
