//! Head-gradient magnification with linear annealing.
//!
//! At step `t` of `T` the head gradients are multiplied by
//! `λ = λ0 − (λ0 − 1)·t/T`, which falls from `λ0` to 1. Backbone gradients
//! are never touched, including the part of them that flows back from the
//! heads, since scaling happens after the backward pass.

use crate::error::{Error, Result};
use crate::net::{Gradients, ParamBank};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    lambda0: f64,
    total_steps: usize,
    anneal: bool,
}

impl AnnealSchedule {
    /// Linearly annealed schedule from `lambda0` at step 0 to 1 at `total_steps`.
    pub fn new(lambda0: f64, total_steps: usize) -> Result<Self> {
        Self::build(lambda0, total_steps, true)
    }

    /// Constant magnification `lambda0` at every step.
    pub fn constant(lambda0: f64, total_steps: usize) -> Result<Self> {
        Self::build(lambda0, total_steps, false)
    }

    /// No magnification; identical to training without the schedule.
    pub fn off(total_steps: usize) -> Self {
        Self {
            lambda0: 1.0,
            total_steps: total_steps.max(1),
            anneal: false,
        }
    }

    fn build(lambda0: f64, total_steps: usize, anneal: bool) -> Result<Self> {
        if !(lambda0 >= 1.0) || !lambda0.is_finite() {
            return Err(Error::FactorBelowOne(lambda0));
        }
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(Self {
            lambda0,
            total_steps,
            anneal,
        })
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_annealed(&self) -> bool {
        self.anneal
    }

    /// True when the schedule never changes gradients.
    pub fn is_identity(&self) -> bool {
        self.lambda0 == 1.0
    }

    pub fn anneal_factor(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                total: self.total_steps,
            });
        }
        if !self.anneal {
            return Ok(self.lambda0);
        }
        Ok(self.lambda0 - (self.lambda0 - 1.0) * t as f64 / self.total_steps as f64)
    }
}

/// Multiplies every head gradient entry by `lambda`; backbone entries are
/// left bit-for-bit unchanged.
pub fn apply_rga<T: Scalar>(grads: &mut Gradients<T>, lambda: T) -> Result<()> {
    if !(lambda >= T::one()) {
        return Err(Error::FactorBelowOne(lambda.as_f64()));
    }
    if lambda == T::one() {
        return Ok(());
    }
    for head in &mut grads.heads {
        head.scale(lambda);
    }
    Ok(())
}
