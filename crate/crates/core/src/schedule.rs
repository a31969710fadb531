//! Noise schedules over normalized diffusion time `t` in `[0, 1]`.
//!
//! The base rate is linear, `beta(t) = beta_min + (beta_max - beta_min) t`.
//! Token `v` with meta-path score `psi` runs at `beta(t) (1 - lambda psi)`,
//! and its surviving signal fraction is `exp(-(1 - lambda psi) B(t))` where
//! `B(t) = beta_min t + (beta_max - beta_min) t^2 / 2`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub beta_min: f64,
    pub beta_max: f64,
    pub lambda: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            lambda: 0.0,
        }
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

impl ScheduleParams {
    pub fn new(beta_min: f64, beta_max: f64, lambda: f64) -> Result<Self> {
        let p = ScheduleParams {
            beta_min,
            beta_max,
            lambda,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max, got ({}, {})",
                self.beta_min, self.beta_max
            )));
        }
        crate::metapath::check_lambda(self.lambda)
    }

    /// Multiplier `1 - lambda psi` applied to the base rate.
    fn scale(&self, psi: f64) -> Result<f64> {
        if psi < 0.0 || psi.is_nan() {
            return Err(Error::invalid(format!("psi must be non-negative, got {psi}")));
        }
        let s = 1.0 - self.lambda * psi;
        if s <= 0.0 {
            return Err(Error::invalid(format!(
                "psi {psi} reaches 1/lambda for lambda {}; scores must be clipped",
                self.lambda
            )));
        }
        Ok(s)
    }

    pub fn beta_tilde(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.beta_min + (self.beta_max - self.beta_min) * t)
    }

    /// `int_0^t beta(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)
    }

    pub fn beta_v(&self, t: f64, psi: f64) -> Result<f64> {
        Ok(self.beta_tilde(t)? * self.scale(psi)?)
    }

    pub fn alpha_v(&self, t: f64, psi: f64) -> Result<f64> {
        Ok((-self.scale(psi)? * self.integrated_beta(t)?).exp())
    }

    /// Per-token rates for a whole score vector.
    pub fn beta_vec(&self, t: f64, psi: &[f64]) -> Result<Vec<f64>> {
        psi.iter().map(|&p| self.beta_v(t, p)).collect()
    }

    pub fn alpha_vec(&self, t: f64, psi: &[f64]) -> Result<Vec<f64>> {
        psi.iter().map(|&p| self.alpha_v(t, p)).collect()
    }
}

/// Cosine loss weight `cos^2(pi t / 2)`, written as `(1 + cos(pi t)) / 2` so
/// the endpoints are exact.
pub fn loss_weight(t: f64) -> f64 {
    0.5 * (1.0 + (PI * t).cos())
}
