//! Flat-parameter SGD with momentum plus the piecewise-constant step
//! learning-rate schedule used by every experiment.
//!
//! The update follows the convention where weight decay is folded into the
//! gradient before the momentum buffer is updated:
//!
//! ```text
//! g <- grad + weight_decay * theta
//! v <- momentum * v + g
//! theta <- theta - lr * v
//! ```

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{AtfsError, Result};

fn default_base_lr() -> f64 {
    0.1
}

fn default_breakpoints() -> Vec<usize> {
    vec![75, 90]
}

fn default_decay_factor() -> f64 {
    0.1
}

/// Step schedule: the rate starts at `base` and is multiplied by `factor`
/// at each breakpoint epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    #[serde(default = "default_base_lr")]
    pub base: f64,
    /// Epochs at which the rate drops. Must be strictly increasing and lie
    /// inside the training horizon.
    #[serde(default = "default_breakpoints")]
    pub breakpoints: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: default_base_lr(),
            breakpoints: default_breakpoints(),
            factor: default_decay_factor(),
        }
    }
}

impl LrSchedule {
    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        if !self.base.is_finite() || self.base <= 0.0 {
            return Err(AtfsError::InvalidArgument(format!(
                "base learning rate must be > 0, got {}",
                self.base
            )));
        }
        if !self.factor.is_finite() || self.factor <= 0.0 {
            return Err(AtfsError::InvalidArgument(format!(
                "lr decay factor must be > 0, got {}",
                self.factor
            )));
        }
        for pair in self.breakpoints.windows(2) {
            if pair[1] <= pair[0] {
                return Err(AtfsError::InvalidArgument(format!(
                    "lr breakpoints must be strictly increasing, got {:?}",
                    self.breakpoints
                )));
            }
        }
        if let Some(&last) = self.breakpoints.last() {
            if last >= total_epochs {
                return Err(AtfsError::InvalidArgument(format!(
                    "lr breakpoint {last} is outside the {total_epochs}-epoch horizon"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    ///
    /// Drops are applied as successive divisions by `1/factor` rather than
    /// multiplications by `factor`: for the canonical schedule that is
    /// "divided by 10", and `0.1/10` and `0.01/10` round to exactly `0.01`
    /// and `0.001` in f64 where `0.1 * 0.1` does not.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.breakpoints.iter().filter(|&&b| b <= epoch).count();
        let divisor = 1.0 / self.factor;
        let mut lr = self.base;
        for _ in 0..drops {
            lr /= divisor;
        }
        lr
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    2e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return Err(AtfsError::InvalidArgument(format!(
                "momentum must be >= 0, got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(AtfsError::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Stateful SGD over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Array1<f64>,
}

impl Sgd {
    pub fn new(param_count: usize, cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: Array1::zeros(param_count),
        })
    }

    pub fn step(&mut self, params: &mut Array1<f64>, grads: &Array1<f64>, lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(AtfsError::ShapeMismatch(format!(
                "optimizer over {} parameters got {} params / {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(AtfsError::InvalidArgument(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        ndarray::Zip::from(&mut self.velocity)
            .and(&mut *params)
            .and(grads)
            .for_each(|v, p, &g| {
                let g = g + self.cfg.weight_decay * *p;
                *v = self.cfg.momentum * *v + g;
                *p -= lr * *v;
            });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn default_schedule_steps_at_75_and_90() {
        let s = LrSchedule::default();
        s.validate(120).unwrap();
        for e in 0..75 {
            assert_eq!(s.lr_at(e), 0.1);
        }
        for e in 75..90 {
            assert_eq!(s.lr_at(e), 0.01);
        }
        for e in 90..120 {
            assert_eq!(s.lr_at(e), 0.001);
        }
    }

    #[test]
    fn schedule_without_breakpoints_is_constant() {
        let s = LrSchedule {
            base: 0.05,
            breakpoints: vec![],
            factor: 0.1,
        };
        s.validate(10).unwrap();
        assert_abs_diff_eq!(s.lr_at(0), 0.05);
        assert_abs_diff_eq!(s.lr_at(9), 0.05);
    }

    #[test]
    fn schedule_rejects_bad_breakpoints() {
        let dec = LrSchedule {
            breakpoints: vec![90, 75],
            ..LrSchedule::default()
        };
        assert!(dec.validate(120).is_err());
        let dup = LrSchedule {
            breakpoints: vec![75, 75],
            ..LrSchedule::default()
        };
        assert!(dup.validate(120).is_err());
        // The default breakpoints do not fit a 10-epoch horizon.
        assert!(LrSchedule::default().validate(10).is_err());
    }

    #[test]
    fn sgd_hand_trajectory_plain_momentum() {
        // Constant gradient 0.5, lr 0.1, momentum 0.9, no decay:
        // v: 0.5, 0.95, 1.355; theta: 0.95, 0.855, 0.7195.
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = Sgd::new(1, cfg).unwrap();
        let mut theta = array![1.0];
        let grad = array![0.5];
        let expect = [0.95, 0.855, 0.7195];
        for e in expect {
            opt.step(&mut theta, &grad, 0.1).unwrap();
            assert_abs_diff_eq!(theta[0], e, epsilon = 1e-12);
        }
    }

    #[test]
    fn sgd_weight_decay_enters_momentum_buffer() {
        // One step from theta = 2: g = 1 + 0.1 * 2 = 1.2; theta = 2 - 0.12.
        // Second step: g = 1 + 0.1 * 1.88 = 1.188; v = 0.9*1.2 + 1.188;
        // theta = 1.88 - 0.1 * 2.268.
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.1,
        };
        let mut opt = Sgd::new(1, cfg).unwrap();
        let mut theta = array![2.0];
        let grad = array![1.0];
        opt.step(&mut theta, &grad, 0.1).unwrap();
        assert_abs_diff_eq!(theta[0], 1.88, epsilon = 1e-12);
        opt.step(&mut theta, &grad, 0.1).unwrap();
        assert_abs_diff_eq!(theta[0], 1.88 - 0.2268, epsilon = 1e-12);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut opt = Sgd::new(2, SgdConfig::default()).unwrap();
        let mut theta = array![1.0];
        assert!(opt.step(&mut theta, &array![0.1], 0.1).is_err());
    }
}
