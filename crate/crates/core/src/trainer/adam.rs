use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamSlot {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One Adam update without weight decay. `t` is the 1-based number of
/// updates this slot has seen including this one.
pub fn optimizer_step(param: &mut Tensor, grad: &Tensor, slot: &mut AdamSlot, t: u64, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != grad.shape() || slot.m.shape() != param.shape() {
        return Err(Error::ShapeMismatch {
            op: "optimizer_step",
            left: param.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    if t == 0 {
        return Err(Error::invalid("optimizer_step", "update count starts at 1"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let g = grad.data();
    let m = slot.m.data_mut();
    for (mi, &gi) in m.iter_mut().zip(g) {
        *mi = (cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi as f64) as f32;
    }
    let v = slot.v.data_mut();
    for (vi, &gi) in v.iter_mut().zip(g) {
        *vi = (cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * (gi as f64) * (gi as f64)) as f32;
    }
    let (m, v) = (slot.m.data(), slot.v.data());
    for ((p, &mi), &vi) in param.data_mut().iter_mut().zip(m).zip(v) {
        let m_hat = mi as f64 / bc1;
        let v_hat = vi as f64 / bc2;
        *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}
