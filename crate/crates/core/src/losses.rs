//! Softmax-level classification losses with closed-form logit gradients.
//!
//! Every function returns per-sample loss values together with the gradient
//! of the *per-sample* loss with respect to the logits; callers apply their
//! own batch reduction (the training loop divides by the batch size).
//!
//! Logit matrices are `[batch, classes]`. Labels are class indices.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{AtfsError, Result};

/// Numerical floor used inside `log(1 - p)` style terms so that a saturated
/// softmax cannot produce an infinite loss.
const LOG_FLOOR: f64 = 1e-12;

fn check_labels(logits: &Array2<f64>, labels: &[usize]) -> Result<()> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(AtfsError::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            b
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(AtfsError::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    if c < 2 {
        return Err(AtfsError::InvalidArgument(
            "need at least two classes".into(),
        ));
    }
    Ok(())
}

/// Index of the row maximum; ties resolve to the first maximal entry.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

/// Row-wise softmax with the standard max-shift for stability.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= log_sum;
        }
    }
    out
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Cross entropy `-log p_y` per sample. Gradient rows are `p - onehot(y)`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(Array1<f64>, Array2<f64>)> {
    check_labels(logits, labels)?;
    let log_p = log_softmax_rows(logits);
    let mut grad = softmax_rows(logits);
    let mut values = Array1::zeros(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        values[i] = -log_p[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    Ok((values, grad))
}

/// CW margin `max_{j != y} z_j - z_y` per sample, on raw logits. The gradient
/// puts `+1` on the best non-label logit and `-1` on the label logit, so
/// ascending it widens the margin toward misclassification.
pub fn cw_margin(logits: &Array2<f64>, labels: &[usize]) -> Result<(Array1<f64>, Array2<f64>)> {
    check_labels(logits, labels)?;
    let (b, c) = logits.dim();
    let mut values = Array1::zeros(b);
    let mut grad = Array2::zeros((b, c));
    for (i, &y) in labels.iter().enumerate() {
        let mut best = usize::MAX;
        let mut best_val = f64::NEG_INFINITY;
        for j in 0..c {
            if j != y && logits[[i, j]] > best_val {
                best_val = logits[[i, j]];
                best = j;
            }
        }
        values[i] = best_val - logits[[i, y]];
        grad[[i, best]] = 1.0;
        grad[[i, y]] = -1.0;
    }
    Ok((values, grad))
}

/// KL divergence `KL(softmax(q_logits) || softmax(p_logits))` per row, with
/// gradients with respect to both logit matrices.
///
/// Writing `q` for the first distribution and `p` for the second:
/// `d/dq_logits_m = q_m * (log(q_m/p_m) - KL)` and `d/dp_logits_m = p_m - q_m`.
pub fn kl_div_rows(
    q_logits: &Array2<f64>,
    p_logits: &Array2<f64>,
) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    if q_logits.dim() != p_logits.dim() {
        return Err(AtfsError::ShapeMismatch(format!(
            "KL logit shapes {:?} vs {:?}",
            q_logits.dim(),
            p_logits.dim()
        )));
    }
    let (b, c) = q_logits.dim();
    let log_q = log_softmax_rows(q_logits);
    let log_p = log_softmax_rows(p_logits);
    let q = softmax_rows(q_logits);
    let p = softmax_rows(p_logits);
    let mut values = Array1::zeros(b);
    let mut grad_q = Array2::zeros((b, c));
    let mut grad_p = Array2::zeros((b, c));
    for i in 0..b {
        let mut kl = 0.0;
        for m in 0..c {
            kl += q[[i, m]] * (log_q[[i, m]] - log_p[[i, m]]);
        }
        values[i] = kl;
        for m in 0..c {
            grad_q[[i, m]] = q[[i, m]] * ((log_q[[i, m]] - log_p[[i, m]]) - kl);
            grad_p[[i, m]] = p[[i, m]] - q[[i, m]];
        }
    }
    Ok((values, grad_q, grad_p))
}

/// Boosted cross entropy `-log p_y - log(1 - max_{k != y} p_k)` per sample.
///
/// The second term sharpens the margin against the strongest wrong class.
/// `1 - p_k*` is floored at 1e-12 to keep the loss finite when the softmax
/// saturates on a wrong class; the gradient uses the same floor.
pub fn boosted_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(Array1<f64>, Array2<f64>)> {
    check_labels(logits, labels)?;
    let (b, c) = logits.dim();
    let log_p = log_softmax_rows(logits);
    let p = softmax_rows(logits);
    let mut values = Array1::zeros(b);
    let mut grad = Array2::zeros((b, c));
    for (i, &y) in labels.iter().enumerate() {
        let mut k_star = usize::MAX;
        let mut p_star = f64::NEG_INFINITY;
        for k in 0..c {
            if k != y && p[[i, k]] > p_star {
                p_star = p[[i, k]];
                k_star = k;
            }
        }
        let one_minus = (1.0 - p_star).max(LOG_FLOOR);
        values[i] = -log_p[[i, y]] - one_minus.ln();
        // d(-log p_y)/dz = p - onehot; d(-log(1 - p_k*))/dz_j =
        // p_k* (onehot(k*)_j - p_j) / (1 - p_k*).
        for j in 0..c {
            let onehot_y = if j == y { 1.0 } else { 0.0 };
            let onehot_k = if j == k_star { 1.0 } else { 0.0 };
            grad[[i, j]] =
                (p[[i, j]] - onehot_y) + p_star * (onehot_k - p[[i, j]]) / one_minus;
        }
    }
    Ok((values, grad))
}
