//! First-order optimizers with warmup + cosine learning-rate decay.
//!
//! Plain SGD applies `theta <- theta - lr * grad` exactly; Adam keeps its
//! moment estimates as named tensors so a run can be checkpointed and resumed
//! bit-for-bit.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Length of the cosine decay; 0 keeps the learning rate constant after warmup.
    pub decay_steps: usize,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clipping threshold.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            decay_steps: 0,
            min_lr_ratio: 0.1,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            grad_clip: None,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Learning rate at (0-based) update `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.decay_steps == 0 {
            return self.lr;
        }
        let progress = ((step - self.warmup_steps.min(step)) as f64 / self.decay_steps as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Option<Tensor>,
    v: Option<Tensor>,
}

pub struct Optimizer {
    config: OptimConfig,
    step: usize,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, vars: Vec<(String, Var)>) -> Self {
        let slots = vars
            .into_iter()
            .map(|(name, var)| Slot {
                name,
                var,
                m: None,
                v: None,
            })
            .collect();
        Self {
            config,
            step: 0,
            slots,
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// Backpropagate `loss` and apply one update. Returns the learning rate used.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let grads = loss.backward()?;
        self.apply(&grads)
    }

    pub fn apply(&mut self, grads: &GradStore) -> Result<f64> {
        let lr = self.config.lr_at(self.step);
        let scale = match self.config.grad_clip {
            Some(max_norm) => {
                let mut total = 0f64;
                for slot in &self.slots {
                    if let Some(g) = grads.get(slot.var.as_tensor()) {
                        total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                    }
                }
                let norm = total.sqrt();
                if norm > max_norm {
                    max_norm / (norm + 1e-12)
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let cfg = self.config.clone();
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Detached so moment tensors never keep a backward graph alive.
            let g = if scale != 1.0 { (g.detach() * scale)? } else { g.detach() };
            let theta = &slot.var.as_tensor().detach();
            let updated = match cfg.kind {
                OptimizerKind::Sgd => (theta - (g * lr)?)?,
                OptimizerKind::Adam => {
                    let m_prev = match &slot.m {
                        Some(m) => m.clone(),
                        None => g.zeros_like()?,
                    };
                    let v_prev = match &slot.v {
                        Some(v) => v.clone(),
                        None => g.zeros_like()?,
                    };
                    let m = ((m_prev * cfg.beta1)? + (&g * (1.0 - cfg.beta1))?)?;
                    let v = ((v_prev * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?;
                    let m_hat = (&m / (1.0 - cfg.beta1.powi(t)))?;
                    let v_hat = (&v / (1.0 - cfg.beta2.powi(t)))?;
                    let update = (m_hat / (v_hat.sqrt()? + cfg.eps)?)?;
                    slot.m = Some(m);
                    slot.v = Some(v);
                    (theta - (update * lr)?)?
                }
            };
            slot.var.set(&updated)?;
        }
        Ok(lr)
    }

    /// Moment estimates as named tensors (`adam.m.<param>`, `adam.v.<param>`)
    /// plus the step counter, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for slot in &self.slots {
            if let (Some(m), Some(v)) = (&slot.m, &slot.v) {
                out.push((format!("adam.m.{}", slot.name), m.clone()));
                out.push((format!("adam.v.{}", slot.name), v.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, step: usize, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step = step;
        for slot in &mut self.slots {
            let dtype = slot.var.dtype();
            let m = tensors.get(&format!("adam.m.{}", slot.name));
            let v = tensors.get(&format!("adam.v.{}", slot.name));
            match (m, v) {
                (Some(m), Some(v)) => {
                    if m.dims() != slot.var.dims() || v.dims() != slot.var.dims() {
                        return Err(Error::ShapeError(format!("optimizer state for `{}`", slot.name)));
                    }
                    slot.m = Some(m.to_dtype(dtype)?);
                    slot.v = Some(v.to_dtype(dtype)?);
                }
                _ => {
                    slot.m = None;
                    slot.v = None;
                }
            }
        }
        Ok(())
    }
}
