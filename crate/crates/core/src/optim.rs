//! AdamW with decoupled weight decay and a per-step cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            total_steps: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.total_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// `lr0 · ½ · (1 + cos(π · step / total_steps))`, floored at zero.
pub fn cosine_lr(step: usize, cfg: &OptimConfig) -> Result<f64> {
    if step > cfg.total_steps || cfg.total_steps == 0 {
        return Err(Error::OutOfRange(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    let phase = PI * step as f64 / cfg.total_steps as f64;
    Ok((cfg.lr0 * 0.5 * (1.0 + phase.cos())).max(0.0))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    /// First and second moments per tensor name.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub step: u64,
}

pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

/// One AdamW update over every slot. Nothing is modified if any slot is rejected.
pub fn adamw_step(slots: &mut [ParamSlot<'_>], state: &mut OptimState, cfg: &OptimConfig, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::OutOfRange(format!("learning rate {lr}")));
    }
    for slot in slots.iter() {
        if slot.value.shape != slot.grad.shape {
            return Err(Error::ShapeMismatch(format!(
                "{}: parameter {:?} vs gradient {:?}",
                slot.name, slot.value.shape, slot.grad.shape
            )));
        }
        if let Some((m, _)) = state.moments.get(slot.name) {
            if m.len() != slot.value.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: optimizer state holds {} values, parameter {}",
                    slot.name,
                    m.len(),
                    slot.value.len()
                )));
            }
        }
        if slot.grad.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(slot.name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for slot in slots.iter_mut() {
        let n = slot.value.len();
        let (m, v) = state
            .moments
            .entry(slot.name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for i in 0..n {
            let g = slot.grad.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let p = &mut slot.value.data[i];
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
