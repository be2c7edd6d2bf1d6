//! Feature-space diagnostics over a frozen model: boundary thickness along
//! clean-to-adversarial segments, the inter/intra-class similarity matrix,
//! and a PCA 2-D embedding for plotting.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{linf_violations, pgd, AttackConfig, AttackLoss, Norm};
use crate::data::Dataset;
use crate::error::{AtfsError, Result};
use crate::fs_loss::{normalize_features, FeatureBatch};
use crate::losses::{argmax, softmax_rows};
use crate::nn::{Model, Network};
use crate::rng::{stream_rng, Stream};

/// Chunk size for batched model evaluation during analysis.
const CHUNK: usize = 256;

/// Candidates attacked per round while collecting thickness pairs.
const PAIR_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// Boundary thickness
// ---------------------------------------------------------------------------

/// Anything that maps a batch of inputs to rows of class posteriors.
/// Networks qualify via softmax over their logits; tests substitute
/// closed-form posterior fields.
pub trait Posteriors {
    fn posteriors(&self, x: &Array2<f64>) -> Result<Array2<f64>>;
}

impl Posteriors for Network {
    fn posteriors(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.predict(x)?.logits))
    }
}

fn default_alpha() -> f64 {
    0.0
}

fn default_beta() -> f64 {
    0.75
}

fn default_pairs() -> usize {
    320
}

fn default_segment_points() -> usize {
    128
}

/// L2 PGD used to pair each clean sample with an adversarial counterpart on
/// the other side of the decision boundary.
fn default_pairing_attack() -> AttackConfig {
    AttackConfig {
        epsilon: 5.0,
        step_size: 1.0,
        steps: 20,
        random_start: false,
        loss: AttackLoss::CrossEntropy,
        norm: Norm::L2,
    }
}

/// Boundary-thickness measurement parameters. `alpha`/`beta` bound the
/// posterior gap that counts as "inside" the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThicknessConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Number of (clean, adversarial) segment pairs to average over.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Number of evaluation points per segment (midpoint rule).
    #[serde(default = "default_segment_points")]
    pub segment_points: usize,
    #[serde(default = "default_pairing_attack")]
    pub attack: AttackConfig,
}

impl Default for ThicknessConfig {
    fn default() -> Self {
        ThicknessConfig {
            alpha: default_alpha(),
            beta: default_beta(),
            pairs: default_pairs(),
            segment_points: default_segment_points(),
            attack: default_pairing_attack(),
        }
    }
}

impl ThicknessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite())
            || self.alpha < 0.0
            || self.beta > 1.0
            || self.alpha >= self.beta
        {
            return Err(AtfsError::InvalidArgument(format!(
                "thickness bounds need 0 <= alpha < beta <= 1, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        if self.pairs == 0 || self.segment_points == 0 {
            return Err(AtfsError::InvalidArgument(
                "thickness needs at least one pair and one segment point".into(),
            ));
        }
        self.attack.validate()
    }
}

/// One clean/adversarial segment with the predicted classes at its ends.
#[derive(Debug, Clone)]
pub struct SegmentPair {
    pub x1: Array1<f64>,
    pub x2: Array1<f64>,
    /// Predicted class of `x1`.
    pub c1: usize,
    /// Predicted class of `x2`; differs from `c1` by construction.
    pub c2: usize,
}

/// Thickness measurement plus the evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThicknessReport {
    pub value: f64,
    /// Pairs that actually entered the mean (≤ the configured count).
    pub pairs_used: usize,
    /// Candidates attacked while collecting pairs.
    pub attempts: usize,
    pub config: ThicknessConfig,
}

/// Samples up to `cfg.pairs` segment pairs: each clean sample is attacked
/// with the pairing attack and kept if the prediction flips. Returns the
/// pairs and the number of candidates attacked. Deterministic in the seed;
/// when the attempt budget covers the whole dataset the collected pair set
/// does not depend on sample order.
pub fn sample_thickness_pairs(
    model: &Network,
    data: &Dataset,
    cfg: &ThicknessConfig,
    master_seed: u64,
) -> Result<(Vec<SegmentPair>, usize)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AtfsError::Dataset("thickness needs a nonempty split".into()));
    }
    let mut rng = stream_rng(master_seed, Stream::Thickness, 0, 0);
    let budget = cfg.pairs.saturating_mul(8).max(data.len());
    let mut pairs = Vec::with_capacity(cfg.pairs);
    let mut attempts = 0usize;
    'outer: while attempts < budget {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(PAIR_CHUNK) {
            if pairs.len() >= cfg.pairs || attempts >= budget {
                break 'outer;
            }
            let take = chunk.len().min(budget - attempts);
            let candidates = &chunk[..take];
            attempts += take;
            let (x, labels) = data.gather(candidates);
            let clean_pred = model.predict(&x)?.logits;
            let adv = pgd(model, &x, &labels, &cfg.attack, Some(&mut rng))?;
            let adv_pred = model.predict(&adv.x_adv)?.logits;
            for row in 0..take {
                if pairs.len() >= cfg.pairs {
                    break;
                }
                let c1 = argmax(clean_pred.row(row));
                let c2 = argmax(adv_pred.row(row));
                if c1 != c2 {
                    pairs.push(SegmentPair {
                        x1: x.row(row).to_owned(),
                        x2: adv.x_adv.row(row).to_owned(),
                        c1,
                        c2,
                    });
                }
            }
        }
    }
    Ok((pairs, attempts))
}

/// Midpoint-rule thickness over fixed segments: mean over pairs of
/// `||x1 - x2||_2 * (1/S) * #{t : alpha < p_c1(x(t)) - p_c2(x(t)) < beta}`
/// with `x(t)` sampled at `t = (k + 0.5) / S`.
pub fn thickness_over_pairs<P: Posteriors + ?Sized>(
    model: &P,
    pairs: &[SegmentPair],
    alpha: f64,
    beta: f64,
    segment_points: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(AtfsError::InvalidArgument(
            "thickness over an empty pair set".into(),
        ));
    }
    if segment_points == 0 {
        return Err(AtfsError::InvalidArgument(
            "thickness needs at least one segment point".into(),
        ));
    }
    let s = segment_points;
    let mut total = 0.0;
    for pair in pairs {
        let dim = pair.x1.len();
        let mut grid = Array2::zeros((s, dim));
        for k in 0..s {
            let t = (k as f64 + 0.5) / s as f64;
            for j in 0..dim {
                grid[[k, j]] = pair.x1[j] + t * (pair.x2[j] - pair.x1[j]);
            }
        }
        let post = model.posteriors(&grid)?;
        let inside = (0..s)
            .filter(|&k| {
                let gap = post[[k, pair.c1]] - post[[k, pair.c2]];
                alpha < gap && gap < beta
            })
            .count();
        let dist = pair
            .x1
            .iter()
            .zip(pair.x2.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += dist * inside as f64 / s as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Samples segment pairs and measures boundary thickness. Fails with
/// [`AtfsError::ThicknessUndefined`] if no prediction-flipping pair exists
/// within the attempt budget.
pub fn boundary_thickness(
    model: &Network,
    data: &Dataset,
    cfg: &ThicknessConfig,
    master_seed: u64,
) -> Result<ThicknessReport> {
    let (pairs, attempts) = sample_thickness_pairs(model, data, cfg, master_seed)?;
    if pairs.is_empty() {
        return Err(AtfsError::ThicknessUndefined { attempts });
    }
    let value = thickness_over_pairs(model, &pairs, cfg.alpha, cfg.beta, cfg.segment_points)?;
    Ok(ThicknessReport {
        value,
        pairs_used: pairs.len(),
        attempts,
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------------------
// Class similarity matrix
// ---------------------------------------------------------------------------

/// Mean pairwise cosine similarity of unit features between (and within)
/// classes. Entries without enough samples are NaN and flagged.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    /// C x C, symmetric; `matrix[[i, i]]` averages intra-class pairs
    /// (self-pairs excluded), `matrix[[i, j]]` averages all cross pairs.
    pub matrix: Array2<f64>,
    /// False where the entry had no pair to average (NaN in `matrix`).
    pub defined: Array2<bool>,
    pub class_counts: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    /// Mean of the defined diagonal entries.
    pub fn mean_diagonal(&self) -> f64 {
        let vals: Vec<f64> = (0..self.num_classes())
            .filter(|&i| self.defined[[i, i]])
            .map(|i| self.matrix[[i, i]])
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Mean of the defined off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        let c = self.num_classes();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..c {
            for j in 0..c {
                if i != j && self.defined[[i, j]] {
                    sum += self.matrix[[i, j]];
                    count += 1;
                }
            }
        }
        sum / count as f64
    }
}

/// Computes the similarity matrix from unit features via per-class sums:
/// cross terms are `s_i . s_j / (n_i n_j)` and intra terms subtract the
/// self-pairs, which is algebraically the mean over all pairs.
pub fn class_similarity_matrix(
    features: &FeatureBatch,
    labels: &[usize],
    num_classes: usize,
) -> Result<SimilarityMatrix> {
    let n = features.num_rows();
    if labels.len() != n {
        return Err(AtfsError::ShapeMismatch(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(AtfsError::InvalidArgument("similarity needs classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(AtfsError::InvalidArgument(format!(
            "label {bad} outside 0..{num_classes}"
        )));
    }
    let unit = features.unit();
    let d = features.dim();
    let mut sums = Array2::zeros((num_classes, d));
    let mut sq_norms = vec![0.0f64; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        let h = unit.row(row);
        sq_norms[y] += h.dot(&h);
        sums.row_mut(y).scaled_add(1.0, &h);
    }
    let mut matrix = Array2::from_elem((num_classes, num_classes), f64::NAN);
    let mut defined = Array2::from_elem((num_classes, num_classes), false);
    for i in 0..num_classes {
        for j in 0..num_classes {
            if i == j {
                if counts[i] >= 2 {
                    let s = sums.row(i);
                    let pair_sum = s.dot(&s) - sq_norms[i];
                    matrix[[i, i]] = pair_sum / (counts[i] * (counts[i] - 1)) as f64;
                    defined[[i, i]] = true;
                }
            } else if counts[i] >= 1 && counts[j] >= 1 {
                let v = sums.row(i).dot(&sums.row(j)) / (counts[i] * counts[j]) as f64;
                matrix[[i, j]] = v;
                defined[[i, j]] = true;
            }
        }
    }
    Ok(SimilarityMatrix {
        matrix,
        defined,
        class_counts: counts,
    })
}

// ---------------------------------------------------------------------------
// PCA 2-D export
// ---------------------------------------------------------------------------

/// Whether a feature row came from a clean sample or its adversarial
/// counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Clean,
    Adversarial,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Clean => "clean",
            NodeKind::Adversarial => "adversarial",
        }
    }
}

/// Top-2 principal components of a feature matrix.
#[derive(Debug, Clone)]
pub struct Pca2 {
    /// `(n, 2)` projected coordinates.
    pub coords: Array2<f64>,
    /// `(2, d)` component rows; zero rows where the covariance is
    /// rank-deficient.
    pub components: Array2<f64>,
    pub eigenvalues: [f64; 2],
    pub mean: Array1<f64>,
}

/// PCA onto the top-2 principal axes. Components are sign-fixed so their
/// largest-magnitude entry is positive; axes with (numerically) zero
/// variance are padded with zero components and zero coordinates.
pub fn pca_top2(rows: &Array2<f64>) -> Result<Pca2> {
    let (n, d) = rows.dim();
    if n < 2 || d == 0 {
        return Err(AtfsError::InvalidArgument(format!(
            "PCA needs at least 2 samples with features, got {n} x {d}"
        )));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(AtfsError::NonFinite("PCA input"));
    }
    let mean = rows.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centered = rows - &mean.view().insert_axis(ndarray::Axis(0));
    let cov = centered.t().dot(&centered) / (n - 1) as f64;

    let sym = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });

    let tol = eig.eigenvalues[order[0]].abs().max(1e-300) * 1e-12;
    let mut components = Array2::zeros((2, d));
    let mut eigenvalues = [0.0f64; 2];
    for axis in 0..2 {
        let Some(&col) = order.get(axis) else { break };
        let value = eig.eigenvalues[col];
        if value <= tol {
            // Rank-deficient direction: keep the zero padding.
            continue;
        }
        eigenvalues[axis] = value;
        let v = eig.eigenvectors.column(col);
        let lead = (0..d)
            .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).expect("finite"))
            .expect("d > 0");
        let flip = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[axis, j]] = flip * v[j];
        }
    }
    let coords = centered.dot(&components.t());
    Ok(Pca2 {
        coords,
        components,
        eigenvalues,
        mean,
    })
}

/// One embedded feature row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddedPoint {
    pub node_id: usize,
    pub x: f64,
    pub y: f64,
    pub label: usize,
    pub kind: NodeKind,
}

/// 2-D point table plus the projection that produced it.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub points: Vec<EmbeddedPoint>,
    pub pca: Pca2,
}

/// Projects unit features onto their top-2 principal axes and tags each row
/// with its label and clean/adversarial kind.
pub fn export_features_2d(
    unit_features: &Array2<f64>,
    labels: &[usize],
    kinds: &[NodeKind],
) -> Result<Embedding> {
    let n = unit_features.nrows();
    if labels.len() != n || kinds.len() != n {
        return Err(AtfsError::ShapeMismatch(format!(
            "{n} feature rows with {} labels and {} kinds",
            labels.len(),
            kinds.len()
        )));
    }
    let pca = pca_top2(unit_features)?;
    let points = (0..n)
        .map(|i| EmbeddedPoint {
            node_id: i,
            x: pca.coords[[i, 0]],
            y: pca.coords[[i, 1]],
            label: labels[i],
            kind: kinds[i],
        })
        .collect();
    Ok(Embedding { points, pca })
}

// ---------------------------------------------------------------------------
// Composite analysis over a model + split
// ---------------------------------------------------------------------------

/// PGD-20 at the conventional image budget, used to generate the adversarial
/// features being analyzed.
fn default_feature_attack() -> AttackConfig {
    AttackConfig {
        epsilon: 8.0 / 255.0,
        step_size: 2.0 / 255.0,
        steps: 20,
        random_start: true,
        loss: AttackLoss::CrossEntropy,
        norm: Norm::Linf,
    }
}

/// Parameters of the `analyze` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub thickness: ThicknessConfig,
    /// Attack that generates the adversarial counterpart of every sample
    /// before feature extraction.
    #[serde(default = "default_feature_attack")]
    pub attack: AttackConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            thickness: ThicknessConfig::default(),
            attack: default_feature_attack(),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        self.thickness.validate()?;
        self.attack.validate()
    }
}

/// Everything the `analyze` stage produces.
#[derive(Debug, Clone)]
pub struct AnalysisReport {
    pub similarity_clean: SimilarityMatrix,
    pub similarity_adv: SimilarityMatrix,
    pub thickness: ThicknessReport,
    pub embedding: Embedding,
    /// Raw (unnormalized) features, rows interleaved clean/adversarial in
    /// node order `2i` / `2i + 1`.
    pub raw_features: Array2<f64>,
    pub node_labels: Vec<usize>,
    pub node_kinds: Vec<NodeKind>,
}

/// Runs the full diagnostic suite on one split: attacks every sample,
/// extracts clean and adversarial features, and computes similarity
/// matrices, the PCA embedding, and boundary thickness.
pub fn analyze_model(
    model: &Network,
    data: &Dataset,
    cfg: &AnalysisConfig,
    master_seed: u64,
) -> Result<AnalysisReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AtfsError::Dataset("analysis needs a nonempty split".into()));
    }
    let n = data.len();
    let fdim = model.feature_dim();
    let mut clean_feats = Array2::zeros((n, fdim));
    let mut adv_feats = Array2::zeros((n, fdim));
    let mut rng = stream_rng(master_seed, Stream::Thickness, 1, 0);
    let mut at = 0;
    while at < n {
        let hi = (at + CHUNK).min(n);
        let x = data.x.slice(ndarray::s![at..hi, ..]).to_owned();
        let labels = &data.labels[at..hi];
        clean_feats
            .slice_mut(ndarray::s![at..hi, ..])
            .assign(&model.predict(&x)?.features);
        let adv = pgd(model, &x, labels, &cfg.attack, Some(&mut rng))?;
        if cfg.attack.norm == Norm::Linf {
            let violations = linf_violations(&adv.x_adv, &x, cfg.attack.epsilon);
            if violations > 0 {
                return Err(AtfsError::Infeasible {
                    attack: "analysis feature attack".into(),
                    violations,
                });
            }
        }
        adv_feats
            .slice_mut(ndarray::s![at..hi, ..])
            .assign(&model.predict(&adv.x_adv)?.features);
        at = hi;
    }

    let c = data.num_classes;
    let similarity_clean =
        class_similarity_matrix(&normalize_features(clean_feats.clone())?, &data.labels, c)?;
    let similarity_adv =
        class_similarity_matrix(&normalize_features(adv_feats.clone())?, &data.labels, c)?;

    let mut raw_features = Array2::zeros((2 * n, fdim));
    let mut node_labels = Vec::with_capacity(2 * n);
    let mut node_kinds = Vec::with_capacity(2 * n);
    for i in 0..n {
        raw_features.row_mut(2 * i).assign(&clean_feats.row(i));
        raw_features.row_mut(2 * i + 1).assign(&adv_feats.row(i));
        node_labels.push(data.labels[i]);
        node_labels.push(data.labels[i]);
        node_kinds.push(NodeKind::Clean);
        node_kinds.push(NodeKind::Adversarial);
    }
    let unit = normalize_features(raw_features.clone())?;
    let embedding = export_features_2d(unit.unit(), &node_labels, &node_kinds)?;

    let thickness = boundary_thickness(model, data, &cfg.thickness, master_seed)?;

    Ok(AnalysisReport {
        similarity_clean,
        similarity_adv,
        thickness,
        embedding,
        raw_features,
        node_labels,
        node_kinds,
    })
}
