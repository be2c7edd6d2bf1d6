//! Artifact persistence: the run-directory lock, atomic writes, and a
//! writer/reader pair for every file the lab produces.
//!
//! Two invariants hold for everything in this module:
//!
//! * writes are atomic — content lands in a temp file in the target
//!   directory and is renamed into place, so readers never observe a
//!   half-written artifact;
//! * every writer has a reader that reproduces the written value exactly
//!   (floats are printed with `{}`, Rust's shortest round-trip form).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{EmbeddedPoint, Embedding, NodeKind, SimilarityMatrix, ThicknessReport};
use crate::error::{AtfsError, Result};
use crate::training::{Checkpoint, EpochMetrics, RobustReport};

/// Version stamped into the checkpoint blob, its sidecar, and report.json.
pub const ARTIFACT_VERSION: u32 = 1;

const LOCK_FILE: &str = "run.lock";
const CKPT_MAGIC: &[u8; 8] = b"ATFSCK01";

/// Writes `bytes` to `path` via a temp file + rename in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| AtfsError::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A run directory owned by this process.
///
/// Creation takes an exclusive lock by creating `run.lock`; a second owner
/// of the same directory fails with [`AtfsError::RunDirLocked`]. The lock is
/// released on drop. A stale lock left by a killed process must be removed
/// by hand — the error message names the file.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<RunDir> {
        fs::create_dir_all(root)?;
        let lock = root.join(LOCK_FILE);
        match fs::File::options().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(RunDir {
                root: root.to_path_buf(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(AtfsError::RunDirLocked(format!(
                    "{} exists; remove it if no other run is active",
                    lock.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

fn artifact_err(path: &Path, what: impl std::fmt::Display) -> AtfsError {
    AtfsError::Artifact(format!("{}: {what}", path.display()))
}

fn parse_f64(path: &Path, field: &str, text: &str) -> Result<f64> {
    text.parse::<f64>()
        .map_err(|_| artifact_err(path, format!("bad float {text:?} in column {field}")))
}

fn parse_usize(path: &Path, field: &str, text: &str) -> Result<usize> {
    text.parse::<usize>()
        .map_err(|_| artifact_err(path, format!("bad integer {text:?} in column {field}")))
}

fn kind_to_str(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::Clean => "clean",
        NodeKind::Adversarial => "adversarial",
    }
}

fn kind_from_str(path: &Path, text: &str) -> Result<NodeKind> {
    match text {
        "clean" => Ok(NodeKind::Clean),
        "adversarial" => Ok(NodeKind::Adversarial),
        other => Err(artifact_err(path, format!("unknown node kind {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// metrics.csv
// ---------------------------------------------------------------------------

pub const METRICS_HEADER: &str = "epoch,lr,loss_adv,loss_fs,val_clean_acc,val_robust_acc";

pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch, m.lr, m.loss_adv, m.loss_fs, m.val_clean_acc, m.val_robust_acc
        )
        .expect("string write cannot fail");
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(artifact_err(
                path,
                format!("expected header {METRICS_HEADER:?}, found {other:?}"),
            ))
        }
    }
    let mut history = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(artifact_err(path, format!("expected 6 columns, found {}", cols.len())));
        }
        history.push(EpochMetrics {
            epoch: parse_usize(path, "epoch", cols[0])?,
            lr: parse_f64(path, "lr", cols[1])?,
            loss_adv: parse_f64(path, "loss_adv", cols[2])?,
            loss_fs: parse_f64(path, "loss_fs", cols[3])?,
            val_clean_acc: parse_f64(path, "val_clean_acc", cols[4])?,
            val_robust_acc: parse_f64(path, "val_robust_acc", cols[5])?,
        });
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Checkpoint blob + JSON sidecar
// ---------------------------------------------------------------------------

/// Sidecar metadata stored next to the parameter blob as `<blob>.json`.
/// Validation accuracies are `None` when the run never validated (NaN in
/// the in-memory checkpoint), since JSON has no NaN literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub epoch: usize,
    pub val_clean_acc: Option<f64>,
    pub val_robust_acc: Option<f64>,
    pub master_seed: u64,
    pub param_count: usize,
    /// SHA-256 of the little-endian parameter bytes, hex.
    pub param_sha256: String,
    /// Canonical config echo of the run that produced the checkpoint.
    pub config: serde_json::Value,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn param_bytes(params: &Array1<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for &v in params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        write!(hex, "{byte:02x}").expect("string write cannot fail");
    }
    hex
}

/// Writes the parameter blob to `path` and its metadata to `<path>.json`.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint, config: &serde_json::Value) -> Result<()> {
    let payload = param_bytes(&ckpt.params);
    let mut blob = Vec::with_capacity(20 + payload.len());
    blob.extend_from_slice(CKPT_MAGIC);
    blob.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
    blob.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    blob.extend_from_slice(&payload);
    let meta = CheckpointMeta {
        format_version: ARTIFACT_VERSION,
        epoch: ckpt.epoch,
        val_clean_acc: (!ckpt.val_clean_acc.is_nan()).then_some(ckpt.val_clean_acc),
        val_robust_acc: (!ckpt.val_robust_acc.is_nan()).then_some(ckpt.val_robust_acc),
        master_seed: ckpt.master_seed,
        param_count: ckpt.params.len(),
        param_sha256: sha256_hex(&payload),
        config: config.clone(),
    };
    let mut meta_text = serde_json::to_string_pretty(&meta)?;
    meta_text.push('\n');
    atomic_write(path, &blob)?;
    atomic_write(&sidecar_path(path), meta_text.as_bytes())
}

/// Reads a checkpoint blob and its sidecar, verifying magic, version,
/// length, and parameter hash.
pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, CheckpointMeta)> {
    let blob = fs::read(path)?;
    let fail = |what: String| AtfsError::Checkpoint(format!("{}: {what}", path.display()));
    if blob.len() < 20 {
        return Err(fail(format!("only {} bytes, header needs 20", blob.len())));
    }
    if &blob[..8] != CKPT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(blob[8..12].try_into().unwrap());
    if version != ARTIFACT_VERSION {
        return Err(fail(format!(
            "format version {version}, this build reads {ARTIFACT_VERSION}"
        )));
    }
    let count = u64::from_le_bytes(blob[12..20].try_into().unwrap()) as usize;
    let expected_len = 20 + count * 8;
    if blob.len() != expected_len {
        return Err(fail(format!(
            "{} bytes for {count} parameters, expected {expected_len}",
            blob.len()
        )));
    }
    let payload = &blob[20..];
    let params: Array1<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| AtfsError::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != ARTIFACT_VERSION {
        return Err(fail(format!("sidecar format version {}", meta.format_version)));
    }
    if meta.param_count != count {
        return Err(fail(format!(
            "sidecar says {} parameters, blob has {count}",
            meta.param_count
        )));
    }
    let hash = sha256_hex(payload);
    if hash != meta.param_sha256 {
        return Err(fail(format!(
            "parameter hash mismatch: blob {hash}, sidecar {}",
            meta.param_sha256
        )));
    }
    let ckpt = Checkpoint {
        params,
        epoch: meta.epoch,
        val_clean_acc: meta.val_clean_acc.unwrap_or(f64::NAN),
        val_robust_acc: meta.val_robust_acc.unwrap_or(f64::NAN),
        master_seed: meta.master_seed,
    };
    Ok((ckpt, meta))
}

// ---------------------------------------------------------------------------
// report.json
// ---------------------------------------------------------------------------

/// Final run report: where the best model came from and how it holds up on
/// the test set. Deliberately contains no wall-clock data so two identical
/// runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub format_version: u32,
    pub run_hash: String,
    pub train_label_histogram: Vec<usize>,
    pub val_label_histogram: Vec<usize>,
    pub test_label_histogram: Vec<usize>,
    pub best_epoch: Option<usize>,
    pub best_val_robust_acc: Option<f64>,
    pub test: RobustReport,
    pub config: serde_json::Value,
}

pub fn write_report_json(path: &Path, report: &RunReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_report_json(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)?;
    let report: RunReport = serde_json::from_str(&text)
        .map_err(|e| artifact_err(path, e))?;
    if report.format_version != ARTIFACT_VERSION {
        return Err(artifact_err(
            path,
            format!("format version {}", report.format_version),
        ));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// similarity.csv
// ---------------------------------------------------------------------------

/// C lines of C comma-separated values, no header. Undefined entries are
/// written as `NaN`.
pub fn write_similarity_csv(path: &Path, sim: &SimilarityMatrix) -> Result<()> {
    let mut out = String::new();
    for row in sim.matrix.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_similarity_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let c = lines.len();
    let mut matrix = Array2::zeros((c, c));
    for (i, line) in lines.iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != c {
            return Err(artifact_err(
                path,
                format!("row {i} has {} columns in a {c}-row matrix", cols.len()),
            ));
        }
        for (j, col) in cols.iter().enumerate() {
            matrix[[i, j]] = parse_f64(path, "similarity", col)?;
        }
    }
    Ok(matrix)
}

// ---------------------------------------------------------------------------
// features_2d.csv / features_raw.csv
// ---------------------------------------------------------------------------

pub const FEATURES_2D_HEADER: &str = "node_id,x,y,label,kind";

pub fn write_features_2d_csv(path: &Path, embedding: &Embedding) -> Result<()> {
    let mut out = String::from(FEATURES_2D_HEADER);
    out.push('\n');
    for p in &embedding.points {
        writeln!(out, "{},{},{},{},{}", p.node_id, p.x, p.y, p.label, kind_to_str(p.kind))
            .expect("string write cannot fail");
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_features_2d_csv(path: &Path) -> Result<Vec<EmbeddedPoint>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == FEATURES_2D_HEADER => {}
        other => {
            return Err(artifact_err(
                path,
                format!("expected header {FEATURES_2D_HEADER:?}, found {other:?}"),
            ))
        }
    }
    let mut points = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(artifact_err(path, format!("expected 5 columns, found {}", cols.len())));
        }
        points.push(EmbeddedPoint {
            node_id: parse_usize(path, "node_id", cols[0])?,
            x: parse_f64(path, "x", cols[1])?,
            y: parse_f64(path, "y", cols[2])?,
            label: parse_usize(path, "label", cols[3])?,
            kind: kind_from_str(path, cols[4])?,
        });
    }
    Ok(points)
}

/// `node_id,label,kind,f0,...,f{d-1}` — the unnormalized feature rows in
/// node order.
pub fn write_features_raw_csv(
    path: &Path,
    features: &Array2<f64>,
    labels: &[usize],
    kinds: &[NodeKind],
) -> Result<()> {
    let n = features.nrows();
    if labels.len() != n || kinds.len() != n {
        return Err(AtfsError::ShapeMismatch(format!(
            "{n} feature rows vs {} labels / {} kinds",
            labels.len(),
            kinds.len()
        )));
    }
    let mut out = String::from("node_id,label,kind");
    for j in 0..features.ncols() {
        write!(out, ",f{j}").expect("string write cannot fail");
    }
    out.push('\n');
    for i in 0..n {
        write!(out, "{},{},{}", i, labels[i], kind_to_str(kinds[i]))
            .expect("string write cannot fail");
        for v in features.row(i) {
            write!(out, ",{v}").expect("string write cannot fail");
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_features_raw_csv(path: &Path) -> Result<(Array2<f64>, Vec<usize>, Vec<NodeKind>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| artifact_err(path, "empty file"))?;
    let head_cols: Vec<&str> = header.split(',').collect();
    if head_cols.len() < 4 || head_cols[..3] != ["node_id", "label", "kind"] {
        return Err(artifact_err(path, format!("bad header {header:?}")));
    }
    let dim = head_cols.len() - 3;
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut kinds = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != dim + 3 {
            return Err(artifact_err(
                path,
                format!("row {i} has {} columns, header implies {}", cols.len(), dim + 3),
            ));
        }
        let node_id = parse_usize(path, "node_id", cols[0])?;
        if node_id != i {
            return Err(artifact_err(path, format!("row {i} carries node_id {node_id}")));
        }
        labels.push(parse_usize(path, "label", cols[1])?);
        kinds.push(kind_from_str(path, cols[2])?);
        for col in &cols[3..] {
            rows.push(parse_f64(path, "feature", col)?);
        }
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, dim), rows)
        .map_err(|e| artifact_err(path, e))?;
    Ok((features, labels, kinds))
}

// ---------------------------------------------------------------------------
// thickness.json
// ---------------------------------------------------------------------------

pub fn write_thickness_json(path: &Path, report: &ThicknessReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_thickness_json(path: &Path) -> Result<ThicknessReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| artifact_err(path, e))
}

// ---------------------------------------------------------------------------
// sweep_summary.csv
// ---------------------------------------------------------------------------

/// One sweep cell: the grid point, the run it hashed to, and its headline
/// numbers. `test_attacks` aligns with the attack-name columns of the
/// summary header.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda_fs: f64,
    pub eta1: f64,
    pub run_hash: String,
    pub best_epoch: Option<usize>,
    pub best_val_robust_acc: f64,
    pub test_clean_acc: f64,
    pub test_attacks: Vec<f64>,
}

pub fn write_sweep_summary_csv(
    path: &Path,
    attack_names: &[String],
    rows: &[SweepRow],
) -> Result<()> {
    let mut out = String::from("lambda_fs,eta1,run_hash,best_epoch,val_robust_acc,clean_acc");
    for name in attack_names {
        if name.is_empty() || name.contains(',') {
            return Err(AtfsError::InvalidArgument(format!(
                "attack name {name:?} cannot head a CSV column"
            )));
        }
        write!(out, ",{name}").expect("string write cannot fail");
    }
    out.push('\n');
    for row in rows {
        if row.test_attacks.len() != attack_names.len() {
            return Err(AtfsError::ShapeMismatch(format!(
                "sweep row has {} attack accuracies, header has {}",
                row.test_attacks.len(),
                attack_names.len()
            )));
        }
        let best = row.best_epoch.map_or(String::new(), |e| e.to_string());
        write!(
            out,
            "{},{},{},{},{},{}",
            row.lambda_fs, row.eta1, row.run_hash, best, row.best_val_robust_acc, row.test_clean_acc
        )
        .expect("string write cannot fail");
        for v in &row.test_attacks {
            write!(out, ",{v}").expect("string write cannot fail");
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_sweep_summary_csv(path: &Path) -> Result<(Vec<String>, Vec<SweepRow>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| artifact_err(path, "empty file"))?;
    let head_cols: Vec<&str> = header.split(',').collect();
    const FIXED: [&str; 6] = [
        "lambda_fs",
        "eta1",
        "run_hash",
        "best_epoch",
        "val_robust_acc",
        "clean_acc",
    ];
    if head_cols.len() < FIXED.len() || head_cols[..FIXED.len()] != FIXED {
        return Err(artifact_err(path, format!("bad header {header:?}")));
    }
    let attack_names: Vec<String> = head_cols[FIXED.len()..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != head_cols.len() {
            return Err(artifact_err(
                path,
                format!("expected {} columns, found {}", head_cols.len(), cols.len()),
            ));
        }
        let best_epoch = if cols[3].is_empty() {
            None
        } else {
            Some(parse_usize(path, "best_epoch", cols[3])?)
        };
        let mut test_attacks = Vec::with_capacity(attack_names.len());
        for col in &cols[FIXED.len()..] {
            test_attacks.push(parse_f64(path, "attack accuracy", col)?);
        }
        rows.push(SweepRow {
            lambda_fs: parse_f64(path, "lambda_fs", cols[0])?,
            eta1: parse_f64(path, "eta1", cols[1])?,
            run_hash: cols[2].to_string(),
            best_epoch,
            best_val_robust_acc: parse_f64(path, "val_robust_acc", cols[4])?,
            test_clean_acc: parse_f64(path, "clean_acc", cols[5])?,
            test_attacks,
        });
    }
    Ok((attack_names, rows))
}
