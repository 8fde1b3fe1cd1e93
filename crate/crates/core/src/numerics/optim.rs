use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{config_err, Error, Result};

/// Adam moments plus the cosine learning-rate schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub base_lr: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ParamSet, base_lr: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if !(base_lr > 0.0) || lr_min < 0.0 || lr_min > base_lr {
            return Err(config_err(format!("bad learning rates base={base_lr} min={lr_min}")));
        }
        Ok(Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            base_lr,
            lr_min,
            total_steps: total_steps.max(1),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }
}

/// Cosine-annealed learning rate; steps past the end stay at `lr_min`.
pub fn cosine_lr(step: u64, opt: &OptimState) -> f64 {
    if step >= opt.total_steps {
        return opt.lr_min;
    }
    let frac = step as f64 / opt.total_steps as f64;
    opt.lr_min + 0.5 * (opt.base_lr - opt.lr_min) * (1.0 + (PI * frac).cos())
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_in_place(max_norm / norm);
    }
    norm
}

/// One bias-corrected Adam update at the scheduled learning rate.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, opt: &mut OptimState) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&opt.m)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite { context: "adam_step".into(), detail: "gradient contains NaN or infinity".into() });
    }
    let lr = cosine_lr(params.step_count, opt);
    params.step_count += 1;
    let t = params.step_count as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);

    let grads_iter = grads.iter();
    let state_iter = opt.m.iter_mut().zip(opt.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads_iter).zip(state_iter) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Exponential moving average of a parameter set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: ParamSet,
    rate: f64,
}

impl EmaState {
    pub fn new(source: &ParamSet, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(config_err(format!("EMA rate must lie in (0,1), got {rate}")));
        }
        Ok(Self { shadow: source.clone(), rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// `shadow <- rate * shadow + (1 - rate) * params`.
    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        self.shadow.check_compatible(params)?;
        let r = self.rate;
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            for (si, pi) in s.data_mut().iter_mut().zip(p.data()) {
                *si = r * *si + (1.0 - r) * pi;
            }
        }
        self.shadow.step_count = params.step_count;
        Ok(())
    }
}
