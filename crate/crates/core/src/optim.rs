//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step_count: u64,
    pub first_moment: ParameterSet,
    pub second_moment: ParameterSet,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_num: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(like: &ParameterSet, weight_decay: f64) -> Self {
        Self::with_betas(like, 0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn with_betas(
        like: &ParameterSet,
        beta1: f64,
        beta2: f64,
        eps_num: f64,
        weight_decay: f64,
    ) -> Self {
        let mut zeros = like.clone();
        zeros.weights.iter_mut().for_each(|w| w.data_mut().fill(0.0));
        zeros.biases.iter_mut().for_each(|b| b.fill(0.0));
        AdamWState {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            beta1,
            beta2,
            eps_num,
            weight_decay,
        }
    }
}

/// One AdamW update over every coordinate.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    adamw_step_masked(params, grads, state, lr, None)
}

/// AdamW update that leaves the weight coordinates flagged in `frozen`
/// untouched: no decay, no moment update, no step. Biases are never frozen.
pub fn adamw_step_masked(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamWState,
    lr: f64,
    frozen: Option<&[Vec<bool>]>,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) {
        return Err(Error::Dimension("AdamW operands differ in shape".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Numeric(format!("invalid learning rate {lr}")));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let hp = Hyper {
        lr,
        beta1: state.beta1,
        beta2: state.beta2,
        eps: state.eps_num,
        decay: state.weight_decay,
        c1: 1.0 - state.beta1.powi(t),
        c2: 1.0 - state.beta2.powi(t),
    };
    for l in 0..params.weights.len() {
        let skip = frozen.map(|f| f[l].as_slice());
        hp.apply(
            params.weights[l].data_mut(),
            grads.weights[l].data(),
            state.first_moment.weights[l].data_mut(),
            state.second_moment.weights[l].data_mut(),
            skip,
        );
        hp.apply(
            &mut params.biases[l],
            &grads.biases[l],
            &mut state.first_moment.biases[l],
            &mut state.second_moment.biases[l],
            None,
        );
    }
    Ok(())
}

struct Hyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    decay: f64,
    c1: f64,
    c2: f64,
}

impl Hyper {
    fn apply(&self, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], skip: Option<&[bool]>) {
        for i in 0..p.len() {
            if skip.is_some_and(|s| s[i]) {
                continue;
            }
            p[i] -= self.lr * self.decay * p[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / self.c1;
            let v_hat = v[i] / self.c2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(eta_max: f64, eta_min: f64, total_steps: u64) -> Result<Self> {
        if eta_min > eta_max || total_steps == 0 {
            return Err(Error::Config(format!(
                "invalid cosine schedule: eta_min={eta_min} eta_max={eta_max} total_steps={total_steps}"
            )));
        }
        Ok(CosineSchedule {
            eta_max,
            eta_min,
            total_steps,
        })
    }
}

static OVERRUN_LOGGED: AtomicBool = AtomicBool::new(false);

pub fn cosine_lr(sched: &CosineSchedule, step: u64) -> f64 {
    if step > sched.total_steps {
        if !OVERRUN_LOGGED.swap(true, Ordering::Relaxed) {
            log::warn!(
                "cosine schedule queried at step {step} beyond {}; clamping to eta_min",
                sched.total_steps
            );
        }
        return sched.eta_min;
    }
    let progress = step as f64 / sched.total_steps as f64;
    sched.eta_min
        + 0.5 * (sched.eta_max - sched.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}
