//! AdamW with decoupled weight decay, plus the warmup/cosine learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::param::{ParamId, Parameter};
use std::collections::HashMap;

/// Per-parameter first/second moment estimates.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW optimizer. The update for each element, in order:
///
/// ```text
/// p  *= 1 - lr * weight_decay          (decoupled decay)
/// m   = b1 * m + (1 - b1) * g
/// v   = b2 * v + (1 - b2) * g^2
/// p  -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Advances the shared timestep; call once before updating the
    /// parameters of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn timestep(&self) -> u32 {
        self.t
    }

    /// Applies one update to a parameter, consuming its gradient. Parameters
    /// without an accumulated gradient are left untouched.
    pub fn update(&mut self, param: &mut Parameter, lr: f64) {
        let Some(grad) = param.take_grad() else {
            return;
        };
        debug_assert!(self.t > 0, "begin_step must run before update");
        let n = param.numel();
        let moments = self.state.entry(param.id()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let data = param.value_mut().data_mut();
        for i in 0..n {
            data[i] *= decay;
            let g = grad[i];
            moments.m[i] = self.beta1 * moments.m[i] + (1.0 - self.beta1) * g;
            moments.v[i] = self.beta2 * moments.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = moments.m[i] / bc1;
            let v_hat = moments.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Linear warmup to `lr_max` over `warmup` steps, then cosine annealing to
/// zero at `total`.
pub fn cosine_warmup_lr(step: usize, total: usize, warmup: usize, lr_max: f64) -> Result<f64> {
    if total <= warmup {
        return Err(Error::InvalidConfig(format!(
            "schedule requires total ({total}) > warmup ({warmup})"
        )));
    }
    if step > total {
        return Err(Error::InvalidConfig(format!(
            "step {step} beyond schedule end {total}"
        )));
    }
    if step < warmup {
        return Ok(lr_max * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
