//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One AdamW update of every parameter in `store`.
///
/// `w ← w − lr·(m̂ / (√v̂ + eps) + weight_decay·w)` with bias-corrected
/// moments. Every parameter must carry a gradient.
pub fn adamw_step(store: &mut ParamStore, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    for p in store.iter_mut() {
        let grad = p.grad.as_ref().expect("checked above");
        p.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
        let w = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..w.len() {
            let g = grad.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w[i]);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: usize) -> Result<Self> {
        if !(lr_max > 0.0) || lr_min < 0.0 || lr_min > lr_max || total_steps == 0 {
            return Err(Error::InvalidParameter(format!(
                "schedule needs 0 <= lr_min <= lr_max, lr_max > 0, total_steps > 0; got {lr_min}, {lr_max}, {total_steps}"
            )));
        }
        Ok(ScheduleSpec {
            lr_max,
            lr_min,
            total_steps,
        })
    }
}

pub fn cosine_lr(spec: &ScheduleSpec, step: usize) -> Result<f64> {
    if step > spec.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: spec.total_steps,
        });
    }
    let frac = step as f64 / spec.total_steps as f64;
    Ok(spec.lr_min
        + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
