//! Time-dependent scalar schedules: noise mixing, ID strength, guidance weight and learning rate.
//!
//! Every decay in this module is expressed over normalised progress in `[0, 1]`.
//! Denoising progress runs from 0 at pure noise to 1 at the data end, so it equals
//! `1 - t` for the flow time `t` used by [`crate::flow`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Initial ID-integration strength.
    pub alpha0: f64,
    /// Total number of denoising steps.
    pub total_steps: usize,
    /// Initial ID-guidance weight.
    pub beta0: f64,
    /// Weight of the ID loss in the joint objective.
    pub lambda: f64,
    pub lr0: f64,
    pub lr_min: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            alpha0: 0.8,
            total_steps: 20,
            beta0: 0.1,
            lambda: 0.5,
            lr0: 1e-3,
            lr_min: 0.0,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha0) {
            return bad(format!("alpha0 = {} must lie in [0, 1]", self.alpha0));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.beta0 >= 0.0 && self.beta0.is_finite()) {
            return bad(format!("beta0 = {} must be finite and >= 0", self.beta0));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {} must be finite and >= 0", self.lambda));
        }
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return bad(format!("need 0 <= lr_min <= lr0 and lr0 > 0, got lr0 = {}, lr_min = {}", self.lr0, self.lr_min));
        }
        Ok(())
    }
}

fn unit_interval<T: Scalar>(what: &'static str, t: T) -> Result<()> {
    if t >= T::zero() && t <= T::one() {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            value: t.as_f64(),
            domain: "[0, 1]",
        })
    }
}

#[inline]
fn cos_sq<T: Scalar>(t: T) -> T {
    let c = (T::of(std::f64::consts::FRAC_PI_2) * t).cos();
    c * c
}

/// Returns `(a(t), b(t)) = (cos²(πt/2), sin²(πt/2))`.
pub fn noise_schedule<T: Scalar>(t: T) -> Result<(T, T)> {
    unit_interval("t", t)?;
    if t == T::zero() {
        return Ok((T::one(), T::zero()));
    }
    if t == T::one() {
        return Ok((T::zero(), T::one()));
    }
    let a = cos_sq(t);
    Ok((a, T::one() - a))
}

/// ID strength at a denoising step index in `[0, T]`.
pub fn id_strength<T: Scalar>(step: T, params: &ScheduleParams) -> Result<T> {
    let total = T::of_usize(params.total_steps);
    if !(step >= T::zero() && step <= total) {
        return Err(Error::Domain {
            what: "denoising step",
            value: step.as_f64(),
            domain: "[0, T]",
        });
    }
    id_strength_at(step / total, params)
}

/// ID strength at normalised denoising progress: `α₀ · (1 - progress)`.
pub fn id_strength_at<T: Scalar>(progress: T, params: &ScheduleParams) -> Result<T> {
    unit_interval("denoising progress", progress)?;
    Ok(T::of(params.alpha0) * (T::one() - progress))
}

/// Guidance weight `β₀ · cos²(π p / 2)` at denoising progress `p`.
pub fn guidance_weight<T: Scalar>(progress: T, params: &ScheduleParams) -> Result<T> {
    unit_interval("denoising progress", progress)?;
    if progress == T::one() {
        return Ok(T::zero());
    }
    Ok(T::of(params.beta0) * cos_sq(progress))
}

pub fn lr_cosine(step: usize, total_steps: usize, params: &ScheduleParams) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Domain {
            what: "optimizer step",
            value: step as f64,
            domain: "[0, total_steps]",
        });
    }
    if step == total_steps {
        return Ok(params.lr_min);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(params.lr_min + 0.5 * (params.lr0 - params.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
