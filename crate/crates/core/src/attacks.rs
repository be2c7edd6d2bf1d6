//! Gradient attacks under an L∞ (and, for segment pairing, L2) budget.
//!
//! All attacks move along loss gradients computed through [`Model`] and
//! project every iterate back onto the intersection of the norm ball around
//! the clean input and the `[0, 1]` box. For the L∞ ball the projection is
//! *exact in floating point*: after clamping, any element whose distance to
//! the clean value still exceeds the budget by a rounding ulp is nudged back
//! toward the clean input, so `|x' - x| <= epsilon` holds elementwise as a
//! bit-level comparison.
//!
//! FGSM is the single-iteration special case of the L∞ PGD loop, which makes
//! `pgd(steps=1, random_start=false, step >= epsilon)` bit-identical to
//! `fgsm` by construction.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtfsError, Result};
use crate::losses::{cross_entropy, cw_margin, kl_div_rows};
use crate::nn::{Model, Prediction};

/// Loss the attacker ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackLoss {
    /// Cross entropy against the true labels.
    CrossEntropy,
    /// Logit margin `max_{j != y} z_j - z_y`.
    CwMargin,
    /// KL divergence of the perturbed predictive distribution from the clean
    /// one (clean logits captured once at attack start).
    KlToClean,
}

/// Norm of the perturbation ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    Linf,
    L2,
}

fn default_epsilon() -> f64 {
    8.0 / 255.0
}

fn default_step_size() -> f64 {
    2.0 / 255.0
}

fn default_steps() -> usize {
    10
}

fn default_random_start() -> bool {
    true
}

fn default_loss() -> AttackLoss {
    AttackLoss::CrossEntropy
}

fn default_norm() -> Norm {
    Norm::Linf
}

/// Inner-maximization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_random_start")]
    pub random_start: bool,
    #[serde(default = "default_loss")]
    pub loss: AttackLoss,
    #[serde(default = "default_norm")]
    pub norm: Norm,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: default_epsilon(),
            step_size: default_step_size(),
            steps: default_steps(),
            random_start: default_random_start(),
            loss: default_loss(),
            norm: default_norm(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(AtfsError::InvalidArgument(format!(
                "attack epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps > 0 && (!self.step_size.is_finite() || self.step_size <= 0.0) {
            return Err(AtfsError::InvalidArgument(format!(
                "attack step size must be > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Adversarial batch aligned with its clean batch.
#[derive(Debug, Clone)]
pub struct PerturbedBatch {
    pub x_adv: Array2<f64>,
    /// Attack-loss value per sample at the returned iterate.
    pub loss_values: Array1<f64>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_box(x: &Array2<f64>) -> Result<()> {
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(AtfsError::InvalidArgument(
            "clean inputs must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Exact projection onto `B_inf(x, epsilon) ∩ [0, 1]^d`, elementwise.
///
/// The ball bounds `x ± epsilon` are only representable approximately, so
/// after clamping, elements are stepped toward `x` by ulps until the exact
/// comparison `|v - x| <= epsilon` holds. The nudge moves toward a point
/// inside the box, so box feasibility is preserved.
fn project_linf_exact(x_adv: &mut Array2<f64>, x: &Array2<f64>, epsilon: f64) {
    ndarray::Zip::from(x_adv).and(x).for_each(|v, &c| {
        if *v > c + epsilon {
            *v = c + epsilon;
        } else if *v < c - epsilon {
            *v = c - epsilon;
        }
        *v = v.clamp(0.0, 1.0);
        while *v - c > epsilon {
            *v = v.next_down();
        }
        while c - *v > epsilon {
            *v = v.next_up();
        }
    });
}

/// Projection onto `B_2(x, epsilon)` followed by the box clamp. The box clamp
/// moves elements toward the (in-box) clean input, so it cannot grow the
/// perturbation norm.
fn project_l2(x_adv: &mut Array2<f64>, x: &Array2<f64>, epsilon: f64) {
    let rows = x_adv.nrows();
    for i in 0..rows {
        let mut norm2 = 0.0;
        for (v, c) in x_adv.row(i).iter().zip(x.row(i)) {
            let d = v - c;
            norm2 += d * d;
        }
        let norm = norm2.sqrt();
        if norm > epsilon {
            let mut scale = epsilon / norm;
            // One multiplicative retreat is enough to absorb rounding.
            for _ in 0..8 {
                let mut check = 0.0;
                for (v, c) in x_adv.row(i).iter().zip(x.row(i)) {
                    let d = (c + (v - c) * scale) - c;
                    check += d * d;
                }
                if check.sqrt() <= epsilon {
                    break;
                }
                scale *= 1.0 - 1e-15;
            }
            for (v, c) in x_adv.row_mut(i).iter_mut().zip(x.row(i)) {
                *v = c + (*v - c) * scale;
            }
        }
    }
    x_adv.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Verifies exact L∞-ball and box feasibility; returns the violation count.
pub fn linf_violations(x_adv: &Array2<f64>, x: &Array2<f64>, epsilon: f64) -> usize {
    x_adv
        .iter()
        .zip(x.iter())
        .filter(|(&v, &c)| !(0.0..=1.0).contains(&v) || (v - c).abs() > epsilon)
        .count()
}

/// Attack-loss values and per-sample logit gradients at one iterate.
fn loss_and_grad(
    pred: &Prediction,
    labels: &[usize],
    loss: AttackLoss,
    clean_logits: Option<&Array2<f64>>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    match loss {
        AttackLoss::CrossEntropy => cross_entropy(&pred.logits, labels),
        AttackLoss::CwMargin => cw_margin(&pred.logits, labels),
        AttackLoss::KlToClean => {
            let clean = clean_logits.expect("clean logits captured at attack start");
            let (v, g, _) = kl_div_rows(&pred.logits, clean)?;
            Ok((v, g))
        }
    }
}

/// Projected gradient ascent on the configured attack loss.
///
/// `rng` drives the random start and must be provided when
/// `cfg.random_start` is set; passing the same generator state reproduces
/// the attack bit for bit.
pub fn pgd<M: Model + ?Sized>(
    model: &M,
    x: &Array2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<PerturbedBatch> {
    cfg.validate()?;
    check_box(x)?;
    if labels.len() != x.nrows() {
        return Err(AtfsError::ShapeMismatch(format!(
            "{} labels for {} input rows",
            labels.len(),
            x.nrows()
        )));
    }

    // Reference distribution for the KL objective, captured once.
    let clean_logits = if cfg.loss == AttackLoss::KlToClean {
        Some(model.predict(x)?.logits)
    } else {
        None
    };

    let mut x_adv = x.clone();
    // steps = 0 is the identity, random start included.
    if cfg.steps > 0 && cfg.epsilon > 0.0 && cfg.random_start {
        let rng = rng.as_deref_mut().ok_or_else(|| {
            AtfsError::InvalidArgument("random_start attack needs an RNG".into())
        })?;
        x_adv.mapv_inplace(|v| {
            let u: f64 = rng.random();
            v + (2.0 * u - 1.0) * cfg.epsilon
        });
        match cfg.norm {
            Norm::Linf => project_linf_exact(&mut x_adv, x, cfg.epsilon),
            Norm::L2 => project_l2(&mut x_adv, x, cfg.epsilon),
        }
    }

    if cfg.epsilon > 0.0 {
        for step in 0..cfg.steps {
            let (_, grad) = model.predict_with_input_grad(&x_adv, &mut |pred| {
                let (_, grad_logits) =
                    loss_and_grad(pred, labels, cfg.loss, clean_logits.as_ref())?;
                Ok(grad_logits)
            })?;
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(AtfsError::NonFiniteGradient { step });
            }
            match cfg.norm {
                Norm::Linf => {
                    ndarray::Zip::from(&mut x_adv).and(&grad).for_each(|v, &g| {
                        *v += cfg.step_size * sign(g);
                    });
                    project_linf_exact(&mut x_adv, x, cfg.epsilon);
                }
                Norm::L2 => {
                    for (mut row, grow) in
                        x_adv.rows_mut().into_iter().zip(grad.rows())
                    {
                        let norm = grow.iter().map(|g| g * g).sum::<f64>().sqrt();
                        let scale = cfg.step_size / norm.max(1e-12);
                        for (v, &g) in row.iter_mut().zip(grow) {
                            *v += scale * g;
                        }
                    }
                    project_l2(&mut x_adv, x, cfg.epsilon);
                }
            }
        }
    }

    let final_pred = model.predict(&x_adv)?;
    let (loss_values, _) = loss_and_grad(&final_pred, labels, cfg.loss, clean_logits.as_ref())?;
    Ok(PerturbedBatch { x_adv, loss_values })
}

/// Fast gradient sign method: the one-step L∞ attack on cross entropy.
pub fn fgsm<M: Model + ?Sized>(
    model: &M,
    x: &Array2<f64>,
    labels: &[usize],
    epsilon: f64,
) -> Result<PerturbedBatch> {
    let cfg = AttackConfig {
        epsilon,
        step_size: if epsilon > 0.0 { epsilon } else { 1.0 },
        steps: 1,
        random_start: false,
        loss: AttackLoss::CrossEntropy,
        norm: Norm::Linf,
    };
    pgd(model, x, labels, &cfg, None)
}

/// PGD ascent on the CW logit margin.
pub fn cw_pgd<M: Model + ?Sized>(
    model: &M,
    x: &Array2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<PerturbedBatch> {
    let cfg = AttackConfig {
        loss: AttackLoss::CwMargin,
        ..*cfg
    };
    pgd(model, x, labels, &cfg, rng)
}
