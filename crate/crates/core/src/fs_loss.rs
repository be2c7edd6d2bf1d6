//! Feature-separability loss over a batch subgraph.
//!
//! Each node's features are L2-normalized; the exponentiated inner products
//! of a node with every other node in the batch form a softmax over its
//! incident links. The loss is the weighted mean log-probability of the
//! node's positive links (counterpart weighted `eta1`, intra-class weighted
//! `eta2`), normalized by its positive degree, then averaged over nodes.
//! Negative links enter only through the softmax denominator: pushing
//! positive-link probability up necessarily pushes negative-link probability
//! down.
//!
//! The analytic gradient with respect to the raw (pre-normalization)
//! features is exposed for the training loop; it is validated against
//! central finite differences in the test suite.

use ndarray::{Array1, Array2};

use crate::atg::{BatchSubgraph, LinkWeights};
use crate::error::{AtfsError, Result};

/// Norm floor applied before dividing a feature row by its L2 norm.
pub const NORM_GUARD: f64 = 1e-12;

fn default_temperature() -> f64 {
    1.0
}

/// Loss-shape knobs. `temperature` divides the inner products before
/// exponentiation; the default 1.0 reproduces the plain formulation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsLossConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for FsLossConfig {
    fn default() -> Self {
        FsLossConfig { temperature: 1.0 }
    }
}

impl FsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(AtfsError::InvalidArgument(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Raw penultimate-layer features together with their row-normalized form.
/// Row order must match the node order of the batch subgraph.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    raw: Array2<f64>,
    unit: Array2<f64>,
    norms: Array1<f64>,
}

impl FeatureBatch {
    pub fn raw(&self) -> &Array2<f64> {
        &self.raw
    }

    pub fn unit(&self) -> &Array2<f64> {
        &self.unit
    }

    pub fn num_rows(&self) -> usize {
        self.raw.nrows()
    }

    pub fn dim(&self) -> usize {
        self.raw.ncols()
    }
}

/// Normalizes each row to unit L2 norm: `h = F / max(||F||, 1e-12)`.
pub fn normalize_features(raw: Array2<f64>) -> Result<FeatureBatch> {
    if raw.nrows() == 0 || raw.ncols() == 0 {
        return Err(AtfsError::ShapeMismatch(format!(
            "feature matrix must be nonempty, got {:?}",
            raw.dim()
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(AtfsError::NonFinite("feature matrix"));
    }
    let mut unit = raw.clone();
    let mut norms = Array1::zeros(raw.nrows());
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[i] = norm;
        let scale = 1.0 / norm.max(NORM_GUARD);
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(FeatureBatch { raw, unit, norms })
}

/// Loss value with per-node detail.
#[derive(Debug, Clone)]
pub struct FsLossOutput {
    /// Mean of `per_node`.
    pub total: f64,
    /// Weighted mean log-probability of each node's positive links.
    pub per_node: Vec<f64>,
    /// Row-stochastic link probabilities: entry `(i, j)` is the softmax
    /// probability of link `(i, j)` among all links incident to `i`.
    /// Diagonal entries are zero.
    pub probabilities: Array2<f64>,
}

struct Scores {
    /// `log p_{ij}` for `j != i`; diagonal is 0 and must not be read.
    log_prob: Array2<f64>,
    prob: Array2<f64>,
}

fn check_alignment(features: &FeatureBatch, sub: &BatchSubgraph) -> Result<()> {
    if features.num_rows() != sub.num_nodes() {
        return Err(AtfsError::ShapeMismatch(format!(
            "{} feature rows for {} subgraph nodes",
            features.num_rows(),
            sub.num_nodes()
        )));
    }
    if sub.num_nodes() < 2 {
        return Err(AtfsError::IsolatedNode(0));
    }
    Ok(())
}

/// Softmax of the pairwise similarity scores over each node's incident links.
fn link_softmax(features: &FeatureBatch, cfg: FsLossConfig) -> Scores {
    let m = features.num_rows();
    let mut scores = features.unit().dot(&features.unit().t());
    if cfg.temperature != 1.0 {
        scores.mapv_inplace(|v| v / cfg.temperature);
    }
    let mut log_prob = Array2::zeros((m, m));
    let mut prob = Array2::zeros((m, m));
    for i in 0..m {
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            if j != i && scores[[i, j]] > max {
                max = scores[[i, j]];
            }
        }
        let mut sum = 0.0;
        for j in 0..m {
            if j != i {
                sum += (scores[[i, j]] - max).exp();
            }
        }
        let log_denom = sum.ln() + max;
        for j in 0..m {
            if j != i {
                let lp = scores[[i, j]] - log_denom;
                log_prob[[i, j]] = lp;
                prob[[i, j]] = lp.exp();
            }
        }
    }
    Scores { log_prob, prob }
}

/// Positive-link weight matrix: `eta1` on counterpart pairs, `eta2` on
/// intra-class pairs, zero elsewhere (negatives and the diagonal).
fn positive_weight_matrix(sub: &BatchSubgraph, weights: LinkWeights) -> Array2<f64> {
    let m = sub.num_nodes();
    let mut w = Array2::zeros((m, m));
    for link in &sub.counterpart_links {
        w[[link.u, link.v]] = weights.eta1;
        w[[link.v, link.u]] = weights.eta1;
    }
    for link in &sub.intra_links {
        w[[link.u, link.v]] = weights.eta2;
        w[[link.v, link.u]] = weights.eta2;
    }
    w
}

fn loss_from_scores(
    scores: &Scores,
    sub: &BatchSubgraph,
    weights: LinkWeights,
) -> (f64, Vec<f64>) {
    let m = sub.num_nodes();
    let w = positive_weight_matrix(sub, weights);
    let mut per_node = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..m {
            if w[[i, j]] != 0.0 {
                acc += w[[i, j]] * scores.log_prob[[i, j]];
            }
        }
        per_node[i] = acc / sub.positive_degree[i] as f64;
    }
    let total = per_node.iter().sum::<f64>() / m as f64;
    (total, per_node)
}

/// Feature-separability loss of a batch.
pub fn fs_loss_batch(
    features: &FeatureBatch,
    sub: &BatchSubgraph,
    weights: LinkWeights,
    cfg: FsLossConfig,
) -> Result<FsLossOutput> {
    cfg.validate()?;
    weights.validate()?;
    check_alignment(features, sub)?;
    let scores = link_softmax(features, cfg);
    let (total, per_node) = loss_from_scores(&scores, sub, weights);
    if !total.is_finite() {
        return Err(AtfsError::NonFinite("feature-separability loss"));
    }
    Ok(FsLossOutput {
        total,
        per_node,
        probabilities: scores.prob,
    })
}

/// Loss plus its gradient with respect to the raw (pre-normalization)
/// features.
pub fn fs_loss_gradient(
    features: &FeatureBatch,
    sub: &BatchSubgraph,
    weights: LinkWeights,
    cfg: FsLossConfig,
) -> Result<(FsLossOutput, Array2<f64>)> {
    cfg.validate()?;
    weights.validate()?;
    check_alignment(features, sub)?;
    let m = sub.num_nodes();
    let scores = link_softmax(features, cfg);
    let (total, per_node) = loss_from_scores(&scores, sub, weights);
    if !total.is_finite() {
        return Err(AtfsError::NonFinite("feature-separability loss"));
    }

    // d total / d s_ij, accumulated from both endpoints' views. From node i's
    // view, with W_i = eta1 |ca(i)| + eta2 |intra(i)|:
    //   d l_i / d s_ij = (w_ij - W_i p_ij) / d⁺_i.
    let w = positive_weight_matrix(sub, weights);
    let mut score_grad = Array2::zeros((m, m));
    for i in 0..m {
        let w_total: f64 = (0..m).map(|j| w[[i, j]]).sum();
        let scale = 1.0 / (m as f64 * sub.positive_degree[i] as f64);
        for j in 0..m {
            if j != i {
                let g = scale * (w[[i, j]] - w_total * scores.prob[[i, j]]);
                score_grad[[i, j]] += g;
                score_grad[[j, i]] += g;
            }
        }
    }

    // s_ij = h_i . h_j / tau  =>  d total / d h = (G h) / tau with symmetric G.
    let mut grad_unit = score_grad.dot(features.unit());
    if cfg.temperature != 1.0 {
        grad_unit.mapv_inplace(|v| v / cfg.temperature);
    }

    // Through the normalization h = r / max(||r||, guard): for ||r|| above the
    // guard the Jacobian is (I - h hᵀ)/||r||; below it the map is linear with
    // slope 1/guard.
    let mut grad_raw = Array2::zeros(features.raw().dim());
    for i in 0..m {
        let g = grad_unit.row(i);
        let norm = features.norms[i];
        if norm > NORM_GUARD {
            let h = features.unit().row(i);
            let gh: f64 = g.dot(&h);
            for (k, slot) in grad_raw.row_mut(i).iter_mut().enumerate() {
                *slot = (g[k] - gh * h[k]) / norm;
            }
        } else {
            for (k, slot) in grad_raw.row_mut(i).iter_mut().enumerate() {
                *slot = g[k] / NORM_GUARD;
            }
        }
    }

    Ok((
        FsLossOutput {
            total,
            per_node,
            probabilities: scores.prob,
        },
        grad_raw,
    ))
}

/// Softmax probability of every link incident to one node, as
/// `(other local index, probability)` in ascending index order.
pub fn link_probabilities(
    features: &FeatureBatch,
    sub: &BatchSubgraph,
    local_node: usize,
) -> Result<Vec<(usize, f64)>> {
    check_alignment(features, sub)?;
    if local_node >= sub.num_nodes() {
        return Err(AtfsError::NodeOutOfRange {
            id: local_node,
            nodes: sub.num_nodes(),
        });
    }
    let scores = link_softmax(features, FsLossConfig::default());
    Ok((0..sub.num_nodes())
        .filter(|&j| j != local_node)
        .map(|j| (j, scores.prob[[local_node, j]]))
        .collect())
}

/// Expanded-form per-node score: positive-link probability mass minus
/// negative-link probability mass. Kept as a documented oracle variant of
/// the simplified loss; because the probabilities sum to one this equals
/// `1 - 2 * negative mass`.
pub fn expanded_score(features: &FeatureBatch, sub: &BatchSubgraph) -> Result<Vec<f64>> {
    check_alignment(features, sub)?;
    let scores = link_softmax(features, FsLossConfig::default());
    let m = sub.num_nodes();
    let mut positive = vec![0.0; m];
    let mut negative = vec![0.0; m];
    for link in sub.all_links() {
        let p_uv = scores.prob[[link.u, link.v]];
        let p_vu = scores.prob[[link.v, link.u]];
        if link.kind.is_positive() {
            positive[link.u] += p_uv;
            positive[link.v] += p_vu;
        } else {
            negative[link.u] += p_uv;
            negative[link.v] += p_vu;
        }
    }
    Ok((0..m).map(|i| positive[i] - negative[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atg::Atg;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Two samples from two classes with orthonormal features: clean and
    /// adversarial of sample 0 sit on e1, those of sample 1 on e2.
    fn orthonormal_case() -> (FeatureBatch, BatchSubgraph) {
        let g = Atg::new(vec![0, 1], LinkWeights::default()).unwrap();
        let sub = g.subgraph_for_batch(&[0, 1]).unwrap();
        let raw = array![
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0],
        ];
        (normalize_features(raw).unwrap(), sub)
    }

    #[test]
    fn normalization_scales_rows() {
        let fb = normalize_features(array![[3.0, 4.0]]).unwrap();
        assert_abs_diff_eq!(fb.unit()[[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(fb.unit()[[0, 1]], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn normalization_is_idempotent_on_unit_rows() {
        let fb = normalize_features(array![[0.6, 0.8]]).unwrap();
        assert_abs_diff_eq!(fb.unit()[[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(fb.unit()[[0, 1]], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn zero_row_stays_finite() {
        let fb = normalize_features(array![[0.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(fb.unit().iter().all(|v| v.is_finite()));
        assert_eq!(fb.unit()[[0, 0]], 0.0);
    }

    #[test]
    fn rejects_non_finite_input() {
        assert!(normalize_features(array![[f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn orthonormal_worked_value() {
        let (fb, sub) = orthonormal_case();
        let out =
            fs_loss_batch(&fb, &sub, LinkWeights::default(), FsLossConfig::default()).unwrap();
        let expected = (std::f64::consts::E / (std::f64::consts::E + 2.0)).ln();
        for &v in &out.per_node {
            assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(out.total, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(out.total, -0.55144, epsilon = 1e-5);
    }

    #[test]
    fn orthonormal_ca_probability() {
        let (fb, sub) = orthonormal_case();
        let probs = link_probabilities(&fb, &sub, 0).unwrap();
        // Local node 1 is the counterpart of node 0.
        let ca = probs.iter().find(|(j, _)| *j == 1).unwrap().1;
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(ca, e / (e + 2.0), epsilon = 1e-12);
        assert_abs_diff_eq!(ca, 0.57611, epsilon = 1e-5);
        let sum: f64 = probs.iter().map(|(_, p)| p).sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_features_give_uniform_probabilities() {
        let g = Atg::new(vec![0, 0, 1], LinkWeights::default()).unwrap();
        let sub = g.subgraph_for_batch(&[0, 1, 2]).unwrap();
        let raw = Array2::from_elem((6, 3), 0.5);
        let fb = normalize_features(raw).unwrap();
        let probs = link_probabilities(&fb, &sub, 2).unwrap();
        for (_, p) in probs {
            assert_abs_diff_eq!(p, 1.0 / 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_pair_identical_features_is_zero_loss() {
        let g = Atg::new(vec![0], LinkWeights::default()).unwrap();
        let sub = g.subgraph_for_batch(&[0]).unwrap();
        let fb = normalize_features(array![[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let out =
            fs_loss_batch(&fb, &sub, LinkWeights::default(), FsLossConfig::default()).unwrap();
        assert_abs_diff_eq!(out.total, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_weights_zero_loss() {
        let (fb, sub) = orthonormal_case();
        let w = LinkWeights::new(0.0, 0.0, 1.0).unwrap();
        let out = fs_loss_batch(&fb, &sub, w, FsLossConfig::default()).unwrap();
        assert_abs_diff_eq!(out.total, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_is_nonpositive_for_nonnegative_weights() {
        let (fb, sub) = orthonormal_case();
        let w = LinkWeights::new(2.0, 0.5, 1.0).unwrap();
        let out = fs_loss_batch(&fb, &sub, w, FsLossConfig::default()).unwrap();
        assert!(out.total <= 0.0);
    }

    #[test]
    fn expanded_score_equals_one_minus_twice_negative_mass() {
        let (fb, sub) = orthonormal_case();
        let expanded = expanded_score(&fb, &sub).unwrap();
        let scores = fs_loss_batch(&fb, &sub, LinkWeights::default(), FsLossConfig::default())
            .unwrap()
            .probabilities;
        for i in 0..sub.num_nodes() {
            let neg_mass: f64 = sub
                .negative_links
                .iter()
                .map(|l| {
                    if l.u == i {
                        scores[[i, l.v]]
                    } else if l.v == i {
                        scores[[i, l.u]]
                    } else {
                        0.0
                    }
                })
                .sum();
            assert_abs_diff_eq!(expanded[i], 1.0 - 2.0 * neg_mass, epsilon = 1e-12);
        }
    }

    #[test]
    fn misaligned_features_rejected() {
        let (fb, _) = orthonormal_case();
        let g = Atg::new(vec![0, 1, 1], LinkWeights::default()).unwrap();
        let sub = g.subgraph_for_batch(&[0, 1, 2]).unwrap();
        assert!(matches!(
            fs_loss_batch(&fb, &sub, LinkWeights::default(), FsLossConfig::default()),
            Err(AtfsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_spot_check() {
        let g = Atg::new(vec![0, 1, 0], LinkWeights::default()).unwrap();
        let sub = g.subgraph_for_batch(&[0, 1, 2]).unwrap();
        let raw = array![
            [0.9, -0.3, 0.4],
            [0.8, -0.1, 0.3],
            [-0.5, 0.7, 0.2],
            [-0.4, 0.6, 0.1],
            [1.1, 0.2, -0.6],
            [0.9, 0.4, -0.5],
        ];
        let w = LinkWeights::new(1.5, 1.0, 1.0).unwrap();
        let cfg = FsLossConfig::default();
        let fb = normalize_features(raw.clone()).unwrap();
        let (_, grad) = fs_loss_gradient(&fb, &sub, w, cfg).unwrap();

        let h = 1e-5;
        for idx in 0..raw.len() {
            let (r, c) = (idx / raw.ncols(), idx % raw.ncols());
            let mut plus = raw.clone();
            plus[[r, c]] += h;
            let mut minus = raw.clone();
            minus[[r, c]] -= h;
            let fp = fs_loss_batch(&normalize_features(plus).unwrap(), &sub, w, cfg)
                .unwrap()
                .total;
            let fm = fs_loss_batch(&normalize_features(minus).unwrap(), &sub, w, cfg)
                .unwrap()
                .total;
            let fd = (fp - fm) / (2.0 * h);
            assert_abs_diff_eq!(grad[[r, c]], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn temperature_sharpen_probabilities() {
        let (fb, sub) = orthonormal_case();
        let base = fs_loss_batch(&fb, &sub, LinkWeights::default(), FsLossConfig::default())
            .unwrap()
            .probabilities[[0, 1]];
        let sharp = {
            let scores = fs_loss_batch(
                &fb,
                &sub,
                LinkWeights::default(),
                FsLossConfig { temperature: 0.5 },
            )
            .unwrap();
            scores.probabilities[[0, 1]]
        };
        // Lower temperature concentrates mass on the highest-similarity link.
        assert!(sharp > base);
    }

    #[test]
    fn permutation_equivariance() {
        let g = Atg::new(vec![0, 1], LinkWeights::default()).unwrap();
        let sub_a = g.subgraph_for_batch(&[0, 1]).unwrap();
        let sub_b = g.subgraph_for_batch(&[1, 0]).unwrap();
        let raw = array![
            [0.9, -0.3],
            [0.8, -0.1],
            [-0.5, 0.7],
            [-0.4, 0.6],
        ];
        let swapped = array![
            [-0.5, 0.7],
            [-0.4, 0.6],
            [0.9, -0.3],
            [0.8, -0.1],
        ];
        let out_a = fs_loss_batch(
            &normalize_features(raw).unwrap(),
            &sub_a,
            LinkWeights::default(),
            FsLossConfig::default(),
        )
        .unwrap();
        let out_b = fs_loss_batch(
            &normalize_features(swapped).unwrap(),
            &sub_b,
            LinkWeights::default(),
            FsLossConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(out_a.total, out_b.total, epsilon = 1e-12);
        assert_abs_diff_eq!(out_a.per_node[0], out_b.per_node[2], epsilon = 1e-12);
        assert_abs_diff_eq!(out_a.per_node[2], out_b.per_node[0], epsilon = 1e-12);
    }
}
