//! Core library for the ATFS laboratory: adversarial training with a feature
//! separability regularizer on a signed sample graph.
//!
//! The pieces, bottom up:
//!
//! * [`atg`] — the adversarial training graph: a signed complete graph over
//!   clean samples and their adversarial counterparts.
//! * [`fs_loss`] — the feature-separability score over batch subgraphs,
//!   with its analytic gradient.
//! * [`losses`] — softmax-level losses (cross entropy, KL, margin, boosted
//!   cross entropy) with closed-form logit gradients.
//! * [`nn`] — a small deterministic feed-forward stack (linear, conv,
//!   pooling) exposing features and logits.
//! * [`attacks`] — L∞ attacks (FGSM, PGD, CW-margin, KL) with exact
//!   feasibility projection, plus the L2 PGD used for thickness pairing.
//! * [`optim`] — SGD with momentum and weight decay, and the step-wise
//!   learning-rate schedule.
//! * [`training`] — the adversarial training loop with the combined
//!   objective, evaluation, and checkpoints.
//! * [`analysis`] — boundary thickness, class similarity matrices, and 2-D
//!   feature projection.
//! * [`data`] — built-in synthetic datasets and the IDX image format.
//! * [`config`] — the JSON run configuration, canonicalization and hashing.
//! * [`report`] — run directory layout and output files (metrics, report,
//!   checkpoints).
//! * [`rng`] — deterministic per-purpose RNG stream derivation.

pub mod analysis;
pub mod atg;
pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod fs_loss;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod training;

pub use analysis::{
    analyze_model, boundary_thickness, class_similarity_matrix, export_features_2d, pca_top2,
    sample_thickness_pairs, thickness_over_pairs, AnalysisConfig, AnalysisReport, EmbeddedPoint,
    Embedding, NodeKind, Pca2, Posteriors, SegmentPair, SimilarityMatrix, ThicknessConfig,
    ThicknessReport,
};
pub use atg::{Atg, BatchSubgraph, Link, LinkKind, LinkWeights, NodeId};
pub use attacks::{cw_pgd, fgsm, linf_violations, pgd, AttackConfig, AttackLoss, Norm, PerturbedBatch};
pub use config::{apply_override, EvalConfig, RunConfig, CONFIG_VERSION};
pub use data::{data_dir, load_dataset, DataBundle, Dataset, DatasetSpec, DATA_DIR_ENV};
pub use error::{AtfsError, Result};
pub use fs_loss::{
    expanded_score, fs_loss_batch, fs_loss_gradient, link_probabilities, normalize_features,
    FeatureBatch, FsLossConfig, FsLossOutput,
};
pub use nn::{build_model, Model, ModelSpec, Network, Prediction, Shape};
pub use optim::{LrSchedule, Sgd, SgdConfig};
pub use report::{
    atomic_write, read_checkpoint, read_features_2d_csv, read_features_raw_csv, read_metrics_csv,
    read_report_json, read_similarity_csv, read_sweep_summary_csv, read_thickness_json,
    write_checkpoint, write_features_2d_csv, write_features_raw_csv, write_metrics_csv,
    write_report_json, write_similarity_csv, write_sweep_summary_csv, write_thickness_json,
    CheckpointMeta, RunDir, RunReport, SweepRow, ARTIFACT_VERSION, METRICS_HEADER,
};
pub use rng::{derive_seed, stream_rng, Stream};
pub use training::{
    adv_loss, default_eval_suite, evaluate_robust, objective_gradient, total_objective, train,
    train_with_hook, AdvVariant, AttackReport, Checkpoint, EpochMetrics, NamedAttack,
    ObjectiveEval, RobustReport, TrainConfig, TrainState,
};
