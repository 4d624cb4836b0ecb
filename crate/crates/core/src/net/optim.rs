use super::ParamBank;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optimization settings: plain SGD with step decay.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub total_steps: usize,
    /// Fractions of `total_steps` after which the rate is multiplied by
    /// `decay_factor`.
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub hidden: usize,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            total_steps: 3000,
            decay_points: vec![8.0 / 12.0, 11.0 / 12.0],
            decay_factor: 0.1,
            cls_weight: 1.0,
            reg_weight: 1.0,
            hidden: 16,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.total_steps == 0 {
            return bad("total steps must be at least 1".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay factor must lie in (0,1), got {}", self.decay_factor));
        }
        if self.decay_points.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("decay points must be fractions in [0,1]".into());
        }
        if self.hidden == 0 || !(self.init_scale >= 0.0) {
            return bad("hidden width must be positive and init scale non-negative".into());
        }
        if self.cls_weight < 0.0 || self.reg_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Steps at which decay kicks in, `floor(fraction * T)`.
    pub fn decay_steps(&self) -> Vec<usize> {
        self.decay_points
            .iter()
            .map(|f| (f * self.total_steps as f64 + 1e-9).floor() as usize)
            .collect()
    }

    /// Learning rate in effect at step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let passed = self.decay_steps().iter().filter(|&&d| t >= d).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }
}

/// `θ ← θ − lr · g` over every array of the bank.
pub fn apply_update<T: Scalar, P: ParamBank<T>>(params: &mut P, grads: &P, lr: T) {
    for ((_, p), (_, g)) in params.slices_mut().into_iter().zip(grads.slices()) {
        p.iter_mut().zip(g).for_each(|(p, &g)| *p -= lr * g);
    }
}

/// One SGD step at iteration `t` with the decayed learning rate.
pub fn sgd_step<T: Scalar, P: ParamBank<T>>(params: &mut P, grads: &P, t: usize, config: &TrainConfig) {
    apply_update(params, grads, T::lit(config.lr_at(t)));
}
