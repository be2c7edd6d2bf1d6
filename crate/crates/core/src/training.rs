//! The training loop: minibatch adversarial training with the feature
//! separability term, SGD with momentum, and validation-based model
//! selection.
//!
//! Each optimizer step follows the same shape: sample a minibatch, generate
//! adversarial counterparts by PGD against the current model, extract the
//! batch subgraph from the training graph, and take one SGD step on
//!
//! ```text
//! lambda_adv * L_adv  -  lambda_fs * L_FS
//! ```
//!
//! The FS term is a log likelihood (maximized), hence the minus sign.
//!
//! When `lambda_fs` is zero and the variant is plain AT, the step touches
//! only the adversarial rows, which makes the parameter trajectory exactly
//! the one a standalone adversarial-training loop would produce: summing a
//! gradient contribution of zero is exact in floating point, but running the
//! clean rows through the same matrix products is not.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::atg::{Atg, BatchSubgraph, LinkWeights};
use crate::attacks::{linf_violations, pgd, AttackConfig, AttackLoss, Norm};
use crate::data::{DataBundle, Dataset};
use crate::error::{AtfsError, Result};
use crate::fs_loss::{fs_loss_gradient, normalize_features, FsLossConfig};
use crate::losses::{
    accuracy, boosted_cross_entropy, cross_entropy, kl_div_rows, softmax_rows,
};
use crate::nn::{Model, Network};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::rng::{stream_rng, Stream};

/// Evaluation batches are processed in fixed-size chunks so image-model
/// buffers stay small. The constant is part of the determinism contract:
/// accumulation order never depends on the split size.
const EVAL_CHUNK: usize = 256;

fn default_trades_weight() -> f64 {
    5.0
}

fn default_mart_weight() -> f64 {
    5.0
}

/// Adversarial-loss variant. The inner maximization matches the outer loss:
/// AT and MART attack cross entropy, TRADES attacks the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AdvVariant {
    /// `CE(f(x'), y)`.
    At,
    /// `CE(f(x), y) + kl_weight * KL(f(x') || f(x))`, `kl_weight` = 1/lambda.
    Trades {
        #[serde(default = "default_trades_weight")]
        kl_weight: f64,
    },
    /// `BCE(f(x'), y) + lambda_m * KL(f(x') || f(x)) * (1 - p_y(f(x)))`
    /// with the boosted cross entropy `BCE`.
    Mart {
        #[serde(default = "default_mart_weight")]
        lambda_m: f64,
    },
}

impl Default for AdvVariant {
    fn default() -> Self {
        AdvVariant::At
    }
}

impl AdvVariant {
    pub fn validate(&self) -> Result<()> {
        let weight = match self {
            AdvVariant::At => return Ok(()),
            AdvVariant::Trades { kl_weight } => *kl_weight,
            AdvVariant::Mart { lambda_m } => *lambda_m,
        };
        if !weight.is_finite() || weight < 0.0 {
            return Err(AtfsError::InvalidArgument(format!(
                "variant weight must be >= 0, got {weight}"
            )));
        }
        Ok(())
    }

    /// Loss driving the inner maximization for this variant.
    pub fn inner_loss(&self) -> AttackLoss {
        match self {
            AdvVariant::At | AdvVariant::Mart { .. } => AttackLoss::CrossEntropy,
            AdvVariant::Trades { .. } => AttackLoss::KlToClean,
        }
    }
}

fn default_lambda_adv() -> f64 {
    1.0
}

fn default_lambda_fs() -> f64 {
    0.1
}

fn default_epochs() -> usize {
    120
}

fn default_batch_size() -> usize {
    128
}

/// Everything one optimizer run needs besides the data and the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight on the adversarial loss.
    #[serde(default = "default_lambda_adv")]
    pub lambda_adv: f64,
    /// Weight on the feature-separability loss; 0 recovers the plain
    /// adversarial baseline.
    #[serde(default = "default_lambda_fs")]
    pub lambda_fs: f64,
    #[serde(default)]
    pub link_weights: LinkWeights,
    #[serde(default)]
    pub fs: FsLossConfig,
    #[serde(default)]
    pub variant: AdvVariant,
    /// Training-time attack. Its `loss` field is overridden by the variant's
    /// inner maximization (see [`AdvVariant::inner_loss`]).
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Master seed; every random stream (shuffling, attack starts,
    /// evaluation) is derived from it.
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_adv: default_lambda_adv(),
            lambda_fs: default_lambda_fs(),
            link_weights: LinkWeights::default(),
            fs: FsLossConfig::default(),
            variant: AdvVariant::default(),
            attack: AttackConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: LrSchedule::default(),
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_adv", self.lambda_adv), ("lambda_fs", self.lambda_fs)] {
            if !v.is_finite() || v < 0.0 {
                return Err(AtfsError::InvalidArgument(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(AtfsError::InvalidArgument("batch size must be >= 1".into()));
        }
        self.link_weights.validate()?;
        self.fs.validate()?;
        self.variant.validate()?;
        self.attack.validate()?;
        self.lr.validate(self.epochs)?;
        self.sgd.validate()
    }
}

/// Metrics recorded after each completed epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-mean adversarial loss over the epoch (variant loss, unweighted).
    pub loss_adv: f64,
    /// Sample-mean FS loss over the epoch; 0.0 when `lambda_fs` = 0 (the term
    /// is not computed on the fast path).
    pub loss_fs: f64,
    pub val_clean_acc: f64,
    pub val_robust_acc: f64,
}

/// Progress of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_robust_acc: f64,
}

/// Best-so-far snapshot selected on validation robust accuracy.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Array1<f64>,
    /// Epoch (0-based) whose validation pass selected these parameters.
    pub epoch: usize,
    pub val_clean_acc: f64,
    pub val_robust_acc: f64,
    /// Master seed of the run; together with the epoch this pins every
    /// derived random stream.
    pub master_seed: u64,
}

/// Combined objective. The FS log likelihood is maximized, hence subtracted.
pub fn total_objective(lambda_adv: f64, lambda_fs: f64, adv: f64, fs_total: f64) -> Result<f64> {
    if !adv.is_finite() {
        return Err(AtfsError::NonFinite("adversarial loss"));
    }
    if !fs_total.is_finite() {
        return Err(AtfsError::NonFinite("feature-separability loss"));
    }
    Ok(lambda_adv * adv - lambda_fs * fs_total)
}

/// Per-sample variant losses plus gradients with respect to the adversarial
/// and clean logits. `grad_clean` is `None` for plain AT, which never looks
/// at the clean forward pass.
fn variant_terms(
    variant: AdvVariant,
    adv_logits: &Array2<f64>,
    clean_logits: Option<&Array2<f64>>,
    labels: &[usize],
) -> Result<(Array1<f64>, Array2<f64>, Option<Array2<f64>>)> {
    match variant {
        AdvVariant::At => {
            let (values, grad_adv) = cross_entropy(adv_logits, labels)?;
            Ok((values, grad_adv, None))
        }
        AdvVariant::Trades { kl_weight } => {
            let clean = clean_logits.expect("TRADES needs the clean forward pass");
            let (ce_values, ce_grad) = cross_entropy(clean, labels)?;
            let (kl_values, kl_grad_adv, kl_grad_clean) = kl_div_rows(adv_logits, clean)?;
            let values = &ce_values + &(kl_values * kl_weight);
            let grad_adv = kl_grad_adv * kl_weight;
            let grad_clean = ce_grad + kl_grad_clean * kl_weight;
            Ok((values, grad_adv, Some(grad_clean)))
        }
        AdvVariant::Mart { lambda_m } => {
            let clean = clean_logits.expect("MART needs the clean forward pass");
            let (bce_values, bce_grad) = boosted_cross_entropy(adv_logits, labels)?;
            let (kl_values, kl_grad_adv, kl_grad_clean) = kl_div_rows(adv_logits, clean)?;
            let p_clean = softmax_rows(clean);
            let (b, c) = adv_logits.dim();
            let mut values = bce_values;
            let mut grad_adv = bce_grad;
            let mut grad_clean = Array2::zeros((b, c));
            for k in 0..b {
                let y = labels[k];
                let p_y = p_clean[[k, y]];
                let conf = 1.0 - p_y;
                values[k] += lambda_m * kl_values[k] * conf;
                for m in 0..c {
                    grad_adv[[k, m]] += lambda_m * conf * kl_grad_adv[[k, m]];
                    // Product rule: the confidence weight also depends on the
                    // clean logits through p_y.
                    let d_py = p_y * (f64::from(m == y) - p_clean[[k, m]]);
                    grad_clean[[k, m]] = lambda_m
                        * (conf * kl_grad_clean[[k, m]] - kl_values[k] * d_py);
                }
            }
            Ok((values, grad_adv, Some(grad_clean)))
        }
    }
}

/// Mean adversarial loss of a variant on an already-generated batch.
pub fn adv_loss(
    variant: AdvVariant,
    model: &Network,
    x: &Array2<f64>,
    x_adv: &Array2<f64>,
    labels: &[usize],
) -> Result<f64> {
    variant.validate()?;
    let adv_logits = model.predict(x_adv)?.logits;
    let clean_logits = match variant {
        AdvVariant::At => None,
        _ => Some(model.predict(x)?.logits),
    };
    let (values, _, _) = variant_terms(variant, &adv_logits, clean_logits.as_ref(), labels)?;
    Ok(values.sum() / values.len() as f64)
}

/// Losses and the full parameter gradient of one ATFS step on a prepared
/// batch (clean inputs, adversarial counterparts, and the batch subgraph).
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss_adv: f64,
    pub loss_fs: f64,
    pub grads: Array1<f64>,
}

/// Computes `lambda_adv * L_adv - lambda_fs * L_FS` and its parameter
/// gradient through a joint forward pass over interleaved clean/adversarial
/// rows (row `2k` clean, row `2k+1` adversarial, matching the subgraph's
/// node order).
pub fn objective_gradient(
    model: &Network,
    cfg: &TrainConfig,
    x: &Array2<f64>,
    x_adv: &Array2<f64>,
    labels: &[usize],
    sub: &BatchSubgraph,
) -> Result<ObjectiveEval> {
    let b = labels.len();
    if x.nrows() != b || x_adv.nrows() != b {
        return Err(AtfsError::ShapeMismatch(format!(
            "{b} labels for {} clean / {} adversarial rows",
            x.nrows(),
            x_adv.nrows()
        )));
    }
    let dim = x.ncols();
    let mut x_joint = Array2::zeros((2 * b, dim));
    for k in 0..b {
        x_joint.row_mut(2 * k).assign(&x.row(k));
        x_joint.row_mut(2 * k + 1).assign(&x_adv.row(k));
    }
    let (pred, cache) = model.forward_full(&x_joint)?;

    let c = model.num_classes();
    let mut adv_logits = Array2::zeros((b, c));
    let mut clean_logits = Array2::zeros((b, c));
    for k in 0..b {
        clean_logits.row_mut(k).assign(&pred.logits.row(2 * k));
        adv_logits.row_mut(k).assign(&pred.logits.row(2 * k + 1));
    }
    let (values, grad_adv, grad_clean) =
        variant_terms(cfg.variant, &adv_logits, Some(&clean_logits), labels)?;
    let loss_adv = values.sum() / b as f64;

    // Mean over samples, scaled by the objective weight.
    let scale = cfg.lambda_adv / b as f64;
    let mut grad_logits = Array2::zeros((2 * b, c));
    for k in 0..b {
        for m in 0..c {
            grad_logits[[2 * k + 1, m]] = scale * grad_adv[[k, m]];
            if let Some(gc) = &grad_clean {
                grad_logits[[2 * k, m]] = scale * gc[[k, m]];
            }
        }
    }

    let (loss_fs, grad_features) = if cfg.lambda_fs > 0.0 {
        let feats = normalize_features(pred.features.clone())?;
        let (out, grad_raw) = fs_loss_gradient(&feats, sub, cfg.link_weights, cfg.fs)?;
        (out.total, Some(grad_raw * (-cfg.lambda_fs)))
    } else {
        (0.0, None)
    };

    let grads = model.backward_full(&cache, &grad_logits, grad_features.as_ref())?;
    Ok(ObjectiveEval {
        loss_adv,
        loss_fs,
        grads,
    })
}

/// Plain-AT step gradient: forwards only the adversarial rows. Exists so a
/// `lambda_fs = 0` run is bit-identical to a standalone adversarial-training
/// loop (a joint pass would round differently).
fn at_gradient(
    model: &Network,
    lambda_adv: f64,
    x_adv: &Array2<f64>,
    labels: &[usize],
) -> Result<ObjectiveEval> {
    let b = labels.len();
    let (pred, cache) = model.forward_full(x_adv)?;
    let (values, mut grad) = cross_entropy(&pred.logits, labels)?;
    let loss_adv = values.sum() / b as f64;
    grad.mapv_inplace(|g| g * lambda_adv / b as f64);
    let grads = model.backward_full(&cache, &grad, None)?;
    Ok(ObjectiveEval {
        loss_adv,
        loss_fs: 0.0,
        grads,
    })
}

fn check_model_matches(model: &Network, data: &Dataset) -> Result<()> {
    let want = data.input_shape.0 * data.input_shape.1 * data.input_shape.2;
    if model.input_dim() != want {
        return Err(AtfsError::ShapeMismatch(format!(
            "model expects {} inputs, dataset provides {want}",
            model.input_dim()
        )));
    }
    if data.labels.iter().any(|&y| y >= model.num_classes()) {
        return Err(AtfsError::InvalidArgument(format!(
            "dataset labels exceed the model's {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

/// Clean and robust accuracy of `model` on `(x, labels)` under one attack,
/// processed in deterministic fixed-size chunks.
fn eval_accuracy(
    model: &Network,
    x: &Array2<f64>,
    labels: &[usize],
    attack: &AttackConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, f64)> {
    let n = labels.len();
    let mut clean_correct = 0.0;
    let mut robust_correct = 0.0;
    let mut at = 0;
    while at < n {
        let hi = (at + EVAL_CHUNK).min(n);
        let x_chunk = x.slice(ndarray::s![at..hi, ..]).to_owned();
        let y_chunk = &labels[at..hi];
        let m = (hi - at) as f64;
        clean_correct += accuracy(&model.predict(&x_chunk)?.logits, y_chunk)? * m;
        let adv = pgd(model, &x_chunk, y_chunk, attack, Some(rng))?;
        match attack.norm {
            Norm::Linf => {
                let violations = linf_violations(&adv.x_adv, &x_chunk, attack.epsilon);
                if violations > 0 {
                    return Err(AtfsError::Infeasible {
                        attack: format!("{:?}", attack.loss),
                        violations,
                    });
                }
            }
            Norm::L2 => {}
        }
        robust_correct += accuracy(&model.predict(&adv.x_adv)?.logits, y_chunk)? * m;
        at = hi;
    }
    Ok((clean_correct / n as f64, robust_correct / n as f64))
}

/// Runs the full training loop. The model is advanced in place to its final
/// state; the returned checkpoint holds the validation-selected parameters.
pub fn train(
    cfg: &TrainConfig,
    data: &DataBundle,
    model: &mut Network,
) -> Result<(TrainState, Checkpoint)> {
    train_with_hook(cfg, data, model, &mut |_, _, _| {})
}

/// [`train`] with a callback invoked after every optimizer step with
/// `(epoch, step, params)`. Used to compare parameter trajectories.
pub fn train_with_hook(
    cfg: &TrainConfig,
    data: &DataBundle,
    model: &mut Network,
    hook: &mut dyn FnMut(usize, usize, &Array1<f64>),
) -> Result<(TrainState, Checkpoint)> {
    cfg.validate()?;
    check_model_matches(model, &data.train)?;
    check_model_matches(model, &data.val)?;

    let atg = Atg::new(data.train.labels.clone(), cfg.link_weights)?;
    let mut params = model.param_vector();
    let mut opt = Sgd::new(params.len(), cfg.sgd)?;
    let mut state = TrainState::default();
    let mut best: Option<Checkpoint> = None;

    let n = data.train.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let train_attack = AttackConfig {
        loss: cfg.variant.inner_loss(),
        ..cfg.attack
    };
    // Validation selection metric: robust accuracy under the training attack
    // budget with a cross-entropy objective.
    let val_attack = AttackConfig {
        loss: AttackLoss::CrossEntropy,
        ..cfg.attack
    };
    let fast_at = cfg.lambda_fs == 0.0 && cfg.variant == AdvVariant::At;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.lr_at(epoch);
        let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle, epoch as u64, 0);
        rand::seq::SliceRandom::shuffle(indices.as_mut_slice(), &mut shuffle_rng);

        let mut adv_sum = 0.0;
        let mut fs_sum = 0.0;
        let mut seen = 0usize;
        for (step, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.train.gather(batch);
            let mut attack_rng =
                stream_rng(cfg.seed, Stream::TrainAttack, epoch as u64, step as u64);
            let adv = pgd(model, &x, &labels, &train_attack, Some(&mut attack_rng))?;

            let eval = if fast_at {
                at_gradient(model, cfg.lambda_adv, &adv.x_adv, &labels)?
            } else {
                let sub = atg.subgraph_for_batch(batch)?;
                objective_gradient(model, cfg, &x, &adv.x_adv, &labels, &sub)?
            };
            if total_objective(cfg.lambda_adv, cfg.lambda_fs, eval.loss_adv, eval.loss_fs)
                .is_err()
                || eval.grads.iter().any(|g| !g.is_finite())
            {
                return Err(AtfsError::Diverged { epoch, step });
            }
            adv_sum += eval.loss_adv * labels.len() as f64;
            fs_sum += eval.loss_fs * labels.len() as f64;
            seen += labels.len();

            opt.step(&mut params, &eval.grads, lr)?;
            model.load_param_vector(params.view())?;
            hook(epoch, step, &params);
        }

        let mut val_rng = stream_rng(cfg.seed, Stream::EvalAttack, epoch as u64, 0);
        let (val_clean_acc, val_robust_acc) = eval_accuracy(
            model,
            &data.val.x,
            &data.val.labels,
            &val_attack,
            &mut val_rng,
        )?;
        state.history.push(EpochMetrics {
            epoch,
            lr,
            loss_adv: adv_sum / seen as f64,
            loss_fs: fs_sum / seen as f64,
            val_clean_acc,
            val_robust_acc,
        });
        // Strictly-greater keeps the earliest epoch on ties.
        if best
            .as_ref()
            .map_or(true, |b| val_robust_acc > b.val_robust_acc)
        {
            best = Some(Checkpoint {
                params: params.clone(),
                epoch,
                val_clean_acc,
                val_robust_acc,
                master_seed: cfg.seed,
            });
        }
    }

    let best = best.unwrap_or_else(|| Checkpoint {
        // Zero-epoch run: the initial parameters are the only candidate.
        params: params.clone(),
        epoch: 0,
        val_clean_acc: f64::NAN,
        val_robust_acc: f64::NAN,
        master_seed: cfg.seed,
    });
    state.best_epoch = (!state.history.is_empty()).then_some(best.epoch);
    state.best_val_robust_acc = best.val_robust_acc;
    Ok((state, best))
}

/// One evaluation attack with a display name for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    pub attack: AttackConfig,
}

/// The default evaluation suite: FGSM, PGD-20, and CW∞ PGD-20, all at the
/// given budget with the conventional 2/255 step.
pub fn default_eval_suite(epsilon: f64) -> Vec<NamedAttack> {
    let step = 2.0 / 255.0;
    vec![
        NamedAttack {
            name: "fgsm".into(),
            attack: AttackConfig {
                epsilon,
                step_size: if epsilon > 0.0 { epsilon } else { 1.0 },
                steps: 1,
                random_start: false,
                loss: AttackLoss::CrossEntropy,
                norm: Norm::Linf,
            },
        },
        NamedAttack {
            name: "pgd-20".into(),
            attack: AttackConfig {
                epsilon,
                step_size: step,
                steps: 20,
                random_start: true,
                loss: AttackLoss::CrossEntropy,
                norm: Norm::Linf,
            },
        },
        NamedAttack {
            name: "cw-20".into(),
            attack: AttackConfig {
                epsilon,
                step_size: step,
                steps: 20,
                random_start: true,
                loss: AttackLoss::CwMargin,
                norm: Norm::Linf,
            },
        },
    ]
}

/// Robust accuracy under one named attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub name: String,
    pub robust_accuracy: f64,
}

/// Clean accuracy plus per-attack robust accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackReport>,
}

/// Evaluates a model on a split under an attack suite. Every adversarial
/// batch is re-checked for exact ball/box feasibility.
pub fn evaluate_robust(
    model: &Network,
    data: &Dataset,
    suite: &[NamedAttack],
    master_seed: u64,
) -> Result<RobustReport> {
    check_model_matches(model, data)?;
    let mut clean_accuracy = None;
    let mut attacks = Vec::with_capacity(suite.len());
    for (idx, named) in suite.iter().enumerate() {
        named.attack.validate()?;
        let mut rng = stream_rng(master_seed, Stream::EvalAttack, 0, idx as u64);
        let (clean, robust) =
            eval_accuracy(model, &data.x, &data.labels, &named.attack, &mut rng)?;
        clean_accuracy.get_or_insert(clean);
        attacks.push(AttackReport {
            name: named.name.clone(),
            robust_accuracy: robust,
        });
    }
    let clean_accuracy = match clean_accuracy {
        Some(v) => v,
        None => {
            // Empty suite: still report clean accuracy.
            accuracy(&model.predict(&data.x)?.logits, &data.labels)?
        }
    };
    Ok(RobustReport {
        clean_accuracy,
        attacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetSpec};
    use crate::nn::{build_model, Linear, ModelSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn identity_model() -> Network {
        let head = Linear {
            w: array![[1.0, 0.0], [0.0, 1.0]],
            b: Array1::zeros(2),
        };
        Network::from_parts((1, 1, 2), 2, vec![], head).unwrap()
    }

    fn tiny_bundle() -> DataBundle {
        load_dataset(&DatasetSpec::SyntheticGaussians {
            num_classes: 2,
            train_size: 48,
            val_size: 16,
            test_size: 16,
            seed: 11,
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            lambda_fs: 0.1,
            attack: AttackConfig {
                epsilon: 0.05,
                step_size: 0.02,
                steps: 3,
                random_start: true,
                loss: AttackLoss::CrossEntropy,
                norm: Norm::Linf,
            },
            epochs: 2,
            batch_size: 16,
            lr: LrSchedule {
                base: 0.05,
                breakpoints: vec![],
                factor: 0.1,
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn total_objective_arithmetic() {
        let v = total_objective(1.0, 0.1, 0.5, -0.6).unwrap();
        assert_abs_diff_eq!(v, 0.56, epsilon = 1e-15);
        // lambda_fs = 0 reduces to the adversarial term.
        assert_abs_diff_eq!(total_objective(1.0, 0.0, 0.5, -0.6).unwrap(), 0.5);
        assert!(total_objective(1.0, 0.1, f64::NAN, 0.0).is_err());
        assert!(total_objective(1.0, 0.1, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn at_loss_worked_example() {
        // Logits [1, 0], label 0: CE = log(1 + e^-1).
        let model = identity_model();
        let x = array![[0.5, 0.5]];
        let x_adv = array![[1.0, 0.0]];
        let v = adv_loss(AdvVariant::At, &model, &x, &x_adv, &[0]).unwrap();
        assert_abs_diff_eq!(v, (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
    }

    #[test]
    fn trades_collapses_to_clean_ce_when_distributions_match() {
        let model = identity_model();
        let x = array![[0.3, 0.7]];
        let trades = AdvVariant::Trades { kl_weight: 5.0 };
        let v = adv_loss(trades, &model, &x, &x, &[1]).unwrap();
        let ce = adv_loss(AdvVariant::At, &model, &x, &x, &[1]).unwrap();
        assert_abs_diff_eq!(v, ce, epsilon = 1e-12);
    }

    #[test]
    fn mart_regularizer_vanishes_at_full_confidence() {
        // Clean logits make p_y -> 1, so only the boosted CE term remains.
        let head = Linear {
            w: array![[60.0, 0.0], [0.0, 60.0]],
            b: Array1::zeros(2),
        };
        let model = Network::from_parts((1, 1, 2), 2, vec![], head).unwrap();
        let x = array![[1.0, 0.0]]; // p_0 ~ 1
        let x_adv = array![[0.6, 0.4]];
        let mart = AdvVariant::Mart { lambda_m: 5.0 };
        let v = adv_loss(mart, &model, &x, &x_adv, &[0]).unwrap();
        let adv_logits = model.predict(&x_adv).unwrap().logits;
        let (bce, _) = boosted_cross_entropy(&adv_logits, &[0]).unwrap();
        assert_abs_diff_eq!(v, bce[0], epsilon = 1e-9);
    }

    /// Central-difference check of the full objective gradient (adversarial
    /// variant + FS term) through a small MLP.
    #[test]
    fn objective_gradient_matches_finite_differences() {
        for variant in [
            AdvVariant::At,
            AdvVariant::Trades { kl_weight: 2.0 },
            AdvVariant::Mart { lambda_m: 1.5 },
        ] {
            let spec = ModelSpec::Mlp {
                hidden: vec![6],
                feature_dim: 4,
            };
            let mut model = build_model(&spec, (1, 1, 3), 2, 21).unwrap();
            let cfg = TrainConfig {
                lambda_adv: 0.8,
                lambda_fs: 0.3,
                variant,
                ..TrainConfig::default()
            };
            let x = array![[0.2, 0.7, 0.4], [0.9, 0.1, 0.5], [0.3, 0.3, 0.8]];
            let x_adv = array![[0.25, 0.65, 0.45], [0.85, 0.15, 0.55], [0.35, 0.25, 0.75]];
            let labels = vec![0usize, 1, 0];
            let atg = Atg::new(labels.clone(), LinkWeights::default()).unwrap();
            let sub = atg.subgraph_for_batch(&[0, 1, 2]).unwrap();

            let eval = objective_gradient(&model, &cfg, &x, &x_adv, &labels, &sub).unwrap();
            let params = model.param_vector();

            let objective_at = |p: &Array1<f64>, model: &mut Network| -> f64 {
                model.load_param_vector(p.view()).unwrap();
                let adv = adv_loss(cfg.variant, model, &x, &x_adv, &labels).unwrap();
                let mut joint = Array2::zeros((6, 3));
                for k in 0..3 {
                    joint.row_mut(2 * k).assign(&x.row(k));
                    joint.row_mut(2 * k + 1).assign(&x_adv.row(k));
                }
                let feats = model.predict(&joint).unwrap().features;
                let fb = normalize_features(feats).unwrap();
                let fs =
                    crate::fs_loss::fs_loss_batch(&fb, &sub, cfg.link_weights, cfg.fs)
                        .unwrap();
                total_objective(cfg.lambda_adv, cfg.lambda_fs, adv, fs.total).unwrap()
            };

            let h = 1e-5;
            let stride = params.len() / 12 + 1;
            for i in (0..params.len()).step_by(stride) {
                let mut plus = params.clone();
                plus[i] += h;
                let mut minus = params.clone();
                minus[i] -= h;
                let fd = (objective_at(&plus, &mut model) - objective_at(&minus, &mut model))
                    / (2.0 * h);
                let got = eval.grads[i];
                let denom = fd.abs().max(got.abs()).max(1e-6);
                assert!(
                    ((got - fd) / denom).abs() < 1e-3,
                    "{variant:?} param {i}: analytic {got} vs fd {fd}"
                );
            }
            model.load_param_vector(params.view()).unwrap();
        }
    }

    #[test]
    fn single_step_with_zero_fs_matches_reference_at() {
        let data = tiny_bundle();
        let spec = ModelSpec::Mlp {
            hidden: vec![5],
            feature_dim: 4,
        };
        let cfg = TrainConfig {
            lambda_fs: 0.0,
            variant: AdvVariant::At,
            epochs: 1,
            ..tiny_config()
        };

        // Reference loop: same shuffling, attack, plain-CE step on the
        // adversarial rows only.
        let mut reference = build_model(&spec, (1, 1, 2), 2, cfg.seed).unwrap();
        let mut ref_params = reference.param_vector();
        let mut ref_opt = Sgd::new(ref_params.len(), cfg.sgd).unwrap();
        let mut indices: Vec<usize> = (0..data.train.len()).collect();
        let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle, 0, 0);
        rand::seq::SliceRandom::shuffle(indices.as_mut_slice(), &mut shuffle_rng);
        let mut ref_traj = Vec::new();
        for (step, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.train.gather(batch);
            let mut rng = stream_rng(cfg.seed, Stream::TrainAttack, 0, step as u64);
            let adv = pgd(&reference, &x, &labels, &cfg.attack, Some(&mut rng)).unwrap();
            let (pred, cache) = reference.forward_full(&adv.x_adv).unwrap();
            let (_, mut grad) = cross_entropy(&pred.logits, &labels).unwrap();
            grad.mapv_inplace(|g| g / labels.len() as f64);
            let grads = reference.backward_full(&cache, &grad, None).unwrap();
            ref_opt.step(&mut ref_params, &grads, cfg.lr.lr_at(0)).unwrap();
            reference.load_param_vector(ref_params.view()).unwrap();
            ref_traj.push(ref_params.clone());
        }

        let mut model = build_model(&spec, (1, 1, 2), 2, cfg.seed).unwrap();
        let mut traj = Vec::new();
        train_with_hook(&cfg, &data, &mut model, &mut |_, _, p| {
            traj.push(p.clone())
        })
        .unwrap();

        assert_eq!(traj.len(), ref_traj.len());
        for (a, b) in traj.iter().zip(&ref_traj) {
            assert_eq!(a, b, "trajectories must agree bit for bit");
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = tiny_bundle();
        let spec = ModelSpec::Mlp {
            hidden: vec![4],
            feature_dim: 3,
        };
        let mut model = build_model(&spec, (1, 1, 2), 2, 1).unwrap();
        let before = model.param_vector();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let (state, best) = train(&cfg, &data, &mut model).unwrap();
        assert!(state.history.is_empty());
        assert!(state.best_epoch.is_none());
        assert_eq!(best.params, before);
        assert_eq!(model.param_vector(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_bundle();
        let spec = ModelSpec::Mlp {
            hidden: vec![5],
            feature_dim: 4,
        };
        let cfg = tiny_config();
        let run = || {
            let mut model = build_model(&spec, (1, 1, 2), 2, cfg.seed).unwrap();
            let (state, best) = train(&cfg, &data, &mut model).unwrap();
            (model.param_vector(), state.history, best.val_robust_acc)
        };
        let (p1, h1, b1) = run();
        let (p2, h2, b2) = run();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn training_improves_on_separable_gaussians() {
        let data = tiny_bundle();
        let spec = ModelSpec::Mlp {
            hidden: vec![8],
            feature_dim: 4,
        };
        let cfg = TrainConfig {
            epochs: 6,
            ..tiny_config()
        };
        let mut model = build_model(&spec, (1, 1, 2), 2, 2).unwrap();
        let (state, best) = train(&cfg, &data, &mut model).unwrap();
        assert_eq!(state.history.len(), 6);
        // Well-separated blobs under a small budget: robust accuracy should
        // end up far above chance.
        assert!(
            best.val_robust_acc > 0.7,
            "robust acc {}",
            best.val_robust_acc
        );
        // Best selection is the argmax of the recorded history.
        let max = state
            .history
            .iter()
            .map(|m| m.val_robust_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.val_robust_acc, max);
        let first_argmax = state
            .history
            .iter()
            .position(|m| m.val_robust_acc == max)
            .unwrap();
        assert_eq!(best.epoch, first_argmax);
    }

    #[test]
    fn evaluate_robust_zero_epsilon_matches_clean() {
        let data = tiny_bundle();
        let spec = ModelSpec::Mlp {
            hidden: vec![5],
            feature_dim: 4,
        };
        let model = build_model(&spec, (1, 1, 2), 2, 9).unwrap();
        let suite = default_eval_suite(0.0);
        let report = evaluate_robust(&model, &data.test, &suite, 123).unwrap();
        for attack in &report.attacks {
            assert_eq!(attack.robust_accuracy, report.clean_accuracy, "{}", attack.name);
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.lambda_fs = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.epochs = 10; // default breakpoints 75/90 no longer fit
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_config_round_trips() {
        let cfg = TrainConfig {
            variant: AdvVariant::Trades { kl_weight: 4.0 },
            ..TrainConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"trades\""));
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let parsed: AdvVariant = serde_json::from_str(r#"{"name": "at"}"#).unwrap();
        assert_eq!(parsed, AdvVariant::At);
    }
}
