//! Run configuration: JSON schema v1, canonical echo, and the config-hash
//! key under which a run's artifacts live.
//!
//! A [`RunConfig`] is the complete description of one experiment. Its
//! canonical form (pretty-printed through the typed struct, defaults filled
//! in) is echoed into every artifact, and its SHA-256 prefix names the run
//! directory, so identical configs always map to the same outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::AnalysisConfig;
use crate::data::DatasetSpec;
use crate::error::{AtfsError, Result};
use crate::nn::ModelSpec;
use crate::training::{default_eval_suite, NamedAttack, TrainConfig};

/// Schema version accepted by this build.
pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_attacks() -> Vec<NamedAttack> {
    default_eval_suite(8.0 / 255.0)
}

/// Final-evaluation attack suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_attacks")]
    pub attacks: Vec<NamedAttack>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            attacks: default_attacks(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for named in &self.attacks {
            if named.name.is_empty() || named.name.contains(',') {
                return Err(AtfsError::Config(format!(
                    "attack name {:?} must be nonempty and comma-free",
                    named.name
                )));
            }
            named.attack.validate()?;
        }
        let mut names: Vec<&str> = self.attacks.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.attacks.len() {
            return Err(AtfsError::Config("duplicate attack names in suite".into()));
        }
        Ok(())
    }
}

/// Everything one run needs: data, model, training, evaluation, analysis,
/// and where to put the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(AtfsError::Config(format!(
                "unsupported config version {} (this build reads {CONFIG_VERSION})",
                self.version
            )));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.analysis.validate()
    }

    /// Parses and validates a config from a JSON value, reporting the path
    /// of the offending field on schema errors.
    pub fn from_value(value: serde_json::Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            AtfsError::Config(format!("at `{}`: {}", e.path(), e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| AtfsError::Config(format!("not valid JSON: {e}")))?;
        RunConfig::from_value(value)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            AtfsError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        RunConfig::from_json_str(&text)
    }

    /// Canonical form: pretty JSON of the typed struct (defaults filled in,
    /// fixed field order) with a trailing newline. This exact byte string is
    /// echoed into artifacts and hashed for the run key.
    pub fn canonical_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// First 12 hex characters of the SHA-256 of the canonical form.
    pub fn run_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        let mut hex = String::with_capacity(12);
        for byte in &digest[..6] {
            hex.push_str(&format!("{byte:02x}"));
        }
        Ok(hex)
    }

    /// Run directory: `<output_dir>/run-<hash>`.
    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_dir.join(format!("run-{}", self.run_hash()?)))
    }
}

/// Applies one `path.to.field=value` override onto a JSON config value.
/// The value literal is parsed as JSON when possible and falls back to a
/// plain string, so `--set train.lambda_fs=0.5` and
/// `--set dataset.name=mnist-subset` both work.
pub fn apply_override(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, literal) = assignment.split_once('=').ok_or_else(|| {
        AtfsError::Config(format!(
            "override {assignment:?} must look like path.to.field=value"
        ))
    })?;
    if path.is_empty() {
        return Err(AtfsError::Config("override path is empty".into()));
    }
    let value: serde_json::Value = serde_json::from_str(literal)
        .unwrap_or_else(|_| serde_json::Value::String(literal.to_string()));
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        if segment.is_empty() {
            return Err(AtfsError::Config(format!(
                "override path {path:?} has an empty segment"
            )));
        }
        let map = cursor.as_object_mut().ok_or_else(|| {
            AtfsError::Config(format!(
                "override path {path:?} descends into a non-object at `{}`",
                segments[..i].join(".")
            ))
        })?;
        if i + 1 == segments.len() {
            map.insert((*segment).to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry((*segment).to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    unreachable!("loop always returns on the last segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{
            "dataset": {"name": "synthetic-gaussians", "num_classes": 2,
                        "train_size": 64, "val_size": 16, "test_size": 16},
            "model": {"architecture": "mlp"},
            "train": {"epochs": 4, "lr": {"breakpoints": []}}
        }"#
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json_str(minimal_json()).unwrap();
        assert_eq!(cfg.version, CONFIG_VERSION);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.eval.attacks.len(), 3);
        assert_eq!(cfg.output_dir, PathBuf::from("runs"));
    }

    #[test]
    fn unknown_field_error_names_the_path() {
        let text = r#"{
            "dataset": {"name": "synthetic-moons"},
            "model": {"architecture": "mlp"},
            "train": {"epochz": 4}
        }"#;
        let err = RunConfig::from_json_str(text).unwrap_err().to_string();
        assert!(err.contains("train"), "missing path in: {err}");
        assert!(err.contains("epochz"), "missing field in: {err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = minimal_json().replacen('{', r#"{"version": 2,"#, 1);
        assert!(RunConfig::from_json_str(&text).is_err());
    }

    #[test]
    fn canonical_json_round_trips_and_hashes_stably() {
        let cfg = RunConfig::from_json_str(minimal_json()).unwrap();
        let canon = cfg.canonical_json().unwrap();
        let back = RunConfig::from_json_str(&canon).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.canonical_json().unwrap(), canon);
        let hash = cfg.run_hash().unwrap();
        assert_eq!(hash.len(), 12);
        assert_eq!(hash, back.run_hash().unwrap());
        assert!(cfg.run_dir().unwrap().ends_with(format!("run-{hash}")));
    }

    #[test]
    fn semantic_validation_runs_after_parse() {
        // Default breakpoints (75/90) do not fit a 4-epoch horizon.
        let text = r#"{
            "dataset": {"name": "synthetic-moons"},
            "model": {"architecture": "mlp"},
            "train": {"epochs": 4}
        }"#;
        assert!(RunConfig::from_json_str(text).is_err());
    }

    #[test]
    fn overrides_replace_and_create_fields() {
        let mut value: serde_json::Value = serde_json::from_str(minimal_json()).unwrap();
        apply_override(&mut value, "train.lambda_fs=0.5").unwrap();
        apply_override(&mut value, "train.seed=9").unwrap();
        apply_override(&mut value, "dataset.train_size=32").unwrap();
        apply_override(&mut value, "eval.attacks=[]").unwrap();
        let cfg = RunConfig::from_value(value).unwrap();
        assert_eq!(cfg.train.lambda_fs, 0.5);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.dataset.sizes().0, 32);
        assert!(cfg.eval.attacks.is_empty());
    }

    #[test]
    fn override_string_fallback_and_errors() {
        let mut value: serde_json::Value = serde_json::from_str(minimal_json()).unwrap();
        // Not valid JSON -> taken as a string.
        apply_override(&mut value, "dataset.name=synthetic-moons").unwrap();
        assert_eq!(value["dataset"]["name"], "synthetic-moons");
        assert!(apply_override(&mut value, "no-equals-sign").is_err());
        assert!(apply_override(&mut value, "dataset.name.deeper=1").is_err());
    }

    #[test]
    fn duplicate_attack_names_rejected() {
        let mut cfg = RunConfig::from_json_str(minimal_json()).unwrap();
        let mut dup = cfg.eval.attacks[0].clone();
        dup.attack.epsilon = 0.1;
        cfg.eval.attacks.push(dup);
        assert!(cfg.validate().is_err());
    }
}
