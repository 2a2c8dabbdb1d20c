use crate::error::{Result, TensorError};
use crate::params::{Grads, ParamStore};

/// Linear warm-up to `base_lr`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            warmup_steps: 2000,
        }
    }
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Self {
        assert!(warmup_steps > 0, "warmup_steps must be positive");
        Self {
            base_lr,
            warmup_steps,
        }
    }

    /// Flat schedule: every step from 1 on uses `lr`.
    pub fn constant(lr: f64) -> Self {
        Self::new(lr, 1)
    }

    pub fn lr(&self, step: u64) -> f64 {
        let ramp = (step as f64 / self.warmup_steps as f64).min(1.0);
        self.base_lr * ramp
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            schedule: LrSchedule::default(),
        }
    }
}

/// Bias-corrected Adam. Moment buffers are created lazily per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        self.config.schedule.lr(self.step + 1)
    }

    /// Applies one update. Any NaN gradient refuses the whole update and
    /// leaves parameters and optimizer state untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|v| v.is_nan()) {
                    return Err(TensorError::NanGradient {
                        param: params.name(id).to_string(),
                    });
                }
            }
        }
        if self.first.len() < params.len() {
            for id in params.ids().skip(self.first.len()) {
                let n = params.get(id).numel();
                self.first.push(vec![0.0; n]);
                self.second.push(vec![0.0; n]);
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            schedule,
        } = self.config;
        let lr = schedule.lr(self.step);
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
