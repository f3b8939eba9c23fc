//! Run orchestration: a config file, four stages (ingest → attack →
//! evaluate → report), a manifest tying artifacts to the config that made
//! them, and an output-directory lock.
//!
//! Stages are deterministic functions of the config and the previous stage's
//! artifacts. Each stage records a hash of exactly the config fields it
//! depends on; downstream stages refuse to run against artifacts produced
//! under different settings instead of silently mixing runs. The search
//! epoch budget is deliberately left out of the attack-stage hash — raising
//! it resumes the same search rather than starting a new one.

pub mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::templates::TemplateError;
use crate::agents::{VictimError, VictimFlavor};
use crate::corpus::{CorpusError, DatasetFormat};
use crate::eval::EvalError;
use crate::forge::ForgeError;
use crate::gateway::GatewayError;
use crate::strategy::StrategyError;
use crate::textutil;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact {path} is unusable: {reason}")]
    BadArtifact { path: String, reason: String },
    #[error("stage '{stage}' has no artifacts for this config; run it first")]
    StaleStage { stage: &'static str },
    #[error("output directory is locked by {0}; remove the file if that run is dead")]
    Locked(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl PipelineError {
    /// Process exit code for the CLI: 2 for config and artifact problems,
    /// 3 for backend failures, 4 for evaluation failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_backend_failure() {
            return 3;
        }
        match self {
            PipelineError::Eval(_) => 4,
            _ => 2,
        }
    }

    fn is_backend_failure(&self) -> bool {
        match self {
            PipelineError::Gateway(_) => true,
            PipelineError::Victim(VictimError::Gateway(_)) => true,
            PipelineError::Forge(ForgeError::Gateway(_))
            | PipelineError::Forge(ForgeError::Victim(VictimError::Gateway(_))) => true,
            PipelineError::Strategy(StrategyError::Victim(VictimError::Gateway(_))) => true,
            PipelineError::Eval(EvalError::Gateway(_))
            | PipelineError::Eval(EvalError::Victim(VictimError::Gateway(_))) => true,
            _ => false,
        }
    }
}

/// Everything one run needs. Every field has a default, so a config file
/// only states what it changes; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Interaction data to ingest; the built-in demo corpus when absent.
    pub dataset_path: Option<String>,
    pub dataset_format: DatasetFormat,
    pub dataset_name: String,
    /// Evaluate a seeded user subset instead of everyone.
    pub sample_users: Option<usize>,
    /// The item the attack promotes.
    pub target_item: String,
    /// Victim flavor: `cf`, `rag`, or `seq`.
    pub victim: String,
    pub victim_endpoint: String,
    pub surrogate_endpoint: String,
    pub auxiliary_endpoint: String,
    pub fluency_endpoint: String,
    /// Model name sent to live endpoints (ignored by mocks).
    pub model_name: String,
    /// Environment variable holding the API key for live endpoints.
    pub api_key_env: Option<String>,
    /// Directory of `<name>.txt` files layered over the built-in templates.
    pub template_dir: Option<String>,
    pub seed: u64,
    pub epochs: usize,
    pub pool_size: usize,
    pub elite_count: usize,
    pub length_limit_words: usize,
    pub convergence_patience: usize,
    pub trials_per_ordering: usize,
    pub attack_max_rounds: u32,
    pub k_values: Vec<u32>,
    pub negatives: usize,
    pub utility_k: u32,
    pub eval_max_rounds: u32,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_path: None,
            dataset_format: DatasetFormat::CanonicalJsonl,
            dataset_name: "demo".into(),
            sample_users: None,
            target_item: crate::fixtures::DEMO_TARGET.into(),
            victim: "cf".into(),
            victim_endpoint: "mock".into(),
            surrogate_endpoint: "mock".into(),
            auxiliary_endpoint: "mock".into(),
            fluency_endpoint: "mock:fluency".into(),
            model_name: "mock".into(),
            api_key_env: None,
            template_dir: None,
            seed: 2024,
            epochs: 20,
            pool_size: 10,
            elite_count: 5,
            length_limit_words: 60,
            convergence_patience: 3,
            trials_per_ordering: 5,
            attack_max_rounds: 3,
            k_values: vec![1, 3, 5],
            negatives: 9,
            utility_k: 3,
            eval_max_rounds: 3,
            out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    /// Reads a JSON config file, expands `${VAR}` references, validates.
    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.expand()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn expand(&mut self) -> Result<(), PipelineError> {
        if let Some(path) = &self.dataset_path {
            self.dataset_path = Some(expand_env(path)?);
        }
        if let Some(dir) = &self.template_dir {
            self.template_dir = Some(expand_env(dir)?);
        }
        self.victim_endpoint = expand_env(&self.victim_endpoint)?;
        self.surrogate_endpoint = expand_env(&self.surrogate_endpoint)?;
        self.auxiliary_endpoint = expand_env(&self.auxiliary_endpoint)?;
        self.fluency_endpoint = expand_env(&self.fluency_endpoint)?;
        self.out_dir = expand_env(&self.out_dir)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |reason: String| Err(PipelineError::Config(reason));
        if self.victim.parse::<VictimFlavor>().is_err() {
            return bad(format!("victim must be cf, rag, or seq (got '{}')", self.victim));
        }
        for (name, endpoint) in [
            ("victim_endpoint", &self.victim_endpoint),
            ("surrogate_endpoint", &self.surrogate_endpoint),
            ("auxiliary_endpoint", &self.auxiliary_endpoint),
            ("fluency_endpoint", &self.fluency_endpoint),
        ] {
            if endpoint.is_empty() {
                return bad(format!("{name} must not be empty"));
            }
        }
        if self.out_dir.is_empty() {
            return bad("out_dir must not be empty".into());
        }
        if self.model_name.is_empty() {
            return bad("model_name must not be empty".into());
        }
        if self.target_item.is_empty() {
            return bad("target_item must not be empty".into());
        }
        if self.epochs == 0 || self.pool_size < 2 {
            return bad("epochs must be >= 1 and pool_size >= 2".into());
        }
        if self.elite_count == 0 || self.elite_count >= self.pool_size {
            return bad(format!(
                "elite_count must be in 1..pool_size (got {} of {})",
                self.elite_count, self.pool_size
            ));
        }
        if self.length_limit_words == 0
            || self.convergence_patience == 0
            || self.trials_per_ordering == 0
            || self.attack_max_rounds == 0
            || self.eval_max_rounds == 0
        {
            return bad("search and update knobs must all be at least 1".into());
        }
        if self.k_values.is_empty() || !self.k_values.windows(2).all(|w| w[0] < w[1]) {
            return bad("k_values must be non-empty and strictly ascending".into());
        }
        if self.k_values[0] == 0 {
            return bad("k values are 1-based".into());
        }
        if self.negatives == 0
            || *self.k_values.last().expect("non-empty") as usize > self.negatives + 1
            || self.utility_k == 0
            || self.utility_k as usize > self.negatives + 1
        {
            return bad("cutoffs must fit inside the candidate list".into());
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn victim_flavor(&self) -> VictimFlavor {
        self.victim.parse().expect("validated")
    }

    /// Identity of the ingest stage's inputs.
    pub fn ingest_hash(&self) -> String {
        textutil::sha256_hex(&format!(
            "ingest|{:?}|{:?}|{}|{:?}|{}",
            self.dataset_path, self.dataset_format, self.dataset_name, self.sample_users, self.seed
        ))
    }

    /// Identity of the attack stage's inputs. The epoch budget is excluded
    /// on purpose: a rerun with more epochs continues the same search.
    pub fn attack_hash(&self) -> String {
        textutil::sha256_hex(&format!(
            "attack|{}|{}|{}|{}|{}|{}|{:?}|{}|{}|{}|{}|{}|{}",
            self.ingest_hash(),
            self.target_item,
            self.victim_endpoint,
            self.surrogate_endpoint,
            self.auxiliary_endpoint,
            self.model_name,
            self.template_dir,
            self.pool_size,
            self.elite_count,
            self.length_limit_words,
            self.convergence_patience,
            self.trials_per_ordering,
            self.attack_max_rounds,
        ))
    }

    /// Identity of the evaluate stage's inputs (epoch budget included here:
    /// evaluation consumes the attack output as of a specific budget).
    pub fn eval_hash(&self) -> String {
        textutil::sha256_hex(&format!(
            "eval|{}|{}|{}|{:?}|{}|{}|{}|{}",
            self.attack_hash(),
            self.epochs,
            self.victim,
            self.k_values,
            self.negatives,
            self.utility_k,
            self.eval_max_rounds,
            self.fluency_endpoint,
        ))
    }
}

/// Expands `${VAR}` references from the environment; unset variables are
/// config errors, not empty strings.
pub fn expand_env(input: &str) -> Result<String, PipelineError> {
    let mut out = String::with_capacity(input.len());
    let mut rest = input;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            return Err(PipelineError::Config(format!("unclosed ${{ in '{input}'")));
        };
        let var = &after[..end];
        if var.is_empty() || !var.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
            return Err(PipelineError::Config(format!("bad variable name '${{{var}}}'")));
        }
        let value = std::env::var(var)
            .map_err(|_| PipelineError::Config(format!("environment variable {var} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub artifacts: Vec<String>,
}

/// Which stages have run in an output directory, and under what config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest { schema_version: MANIFEST_SCHEMA, stages: BTreeMap::new() }
    }
}

impl RunManifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    /// Loads the manifest, or an empty one when the directory is fresh.
    pub fn load(out_dir: &Path) -> Result<RunManifest, PipelineError> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| PipelineError::BadArtifact {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        if manifest.schema_version != MANIFEST_SCHEMA {
            return Err(PipelineError::BadArtifact {
                path: path.display().to_string(),
                reason: format!(
                    "schema {} (this build reads {MANIFEST_SCHEMA})",
                    manifest.schema_version
                ),
            });
        }
        Ok(manifest)
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), PipelineError> {
        let path = Self::path(out_dir);
        let mut body = serde_json::to_string_pretty(self).expect("manifest serialises");
        body.push('\n');
        write_atomic(&path, body.as_bytes())
    }

    pub fn record(&mut self, stage: &str, config_hash: String, artifacts: Vec<String>) {
        self.stages.insert(stage.to_string(), StageRecord { config_hash, artifacts });
    }

    pub fn stage_matches(&self, stage: &str, config_hash: &str) -> bool {
        self.stages.get(stage).is_some_and(|record| record.config_hash == config_hash)
    }
}

/// Creates `path`'s parent and writes via a temp file plus rename, so a
/// crash never leaves a half-written artifact.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |source: std::io::Error, path: &Path| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(e, parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io(e, &tmp))?;
    fs::rename(&tmp, path).map_err(|e| io(e, path))?;
    Ok(())
}

/// Exclusive lock on an output directory, released on drop. Protects the
/// manifest and artifacts from two concurrent runs interleaving writes.
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(out_dir: &Path) -> Result<LockGuard, PipelineError> {
        fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
            path: out_dir.display().to_string(),
            source,
        })?;
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "pid {}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path.display().to_string()))
            }
            Err(source) => {
                Err(PipelineError::Io { path: path.display().to_string(), source })
            }
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_partial_files_load() {
        RunConfig::default().validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, "{\"seed\": 7, \"epochs\": 2}").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.pool_size, RunConfig::default().pool_size);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, "{\"sedd\": 7}").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(PipelineError::Config(_))));
    }

    #[test]
    fn env_references_expand_or_fail_loudly() {
        std::env::set_var("TIPSY_TEST_ENDPOINT", "mock:fluency");
        assert_eq!(expand_env("${TIPSY_TEST_ENDPOINT}").unwrap(), "mock:fluency");
        assert_eq!(expand_env("prefix-${TIPSY_TEST_ENDPOINT}-suffix").unwrap(), "prefix-mock:fluency-suffix");
        assert!(matches!(expand_env("${TIPSY_TEST_UNSET_VAR}"), Err(PipelineError::Config(_))));
        assert!(matches!(expand_env("${unterminated"), Err(PipelineError::Config(_))));
        assert!(matches!(expand_env("${bad name}"), Err(PipelineError::Config(_))));
        assert_eq!(expand_env("no references").unwrap(), "no references");
    }

    #[test]
    fn stage_hashes_track_their_own_inputs() {
        let base = RunConfig::default();

        // More epochs continue the same attack...
        let mut more_epochs = base.clone();
        more_epochs.epochs = 40;
        assert_eq!(base.attack_hash(), more_epochs.attack_hash());
        // ...but evaluation consumes a specific budget.
        assert_ne!(base.eval_hash(), more_epochs.eval_hash());

        let mut bigger_pool = base.clone();
        bigger_pool.pool_size = 12;
        assert_ne!(base.attack_hash(), bigger_pool.attack_hash());
        assert_eq!(base.ingest_hash(), bigger_pool.ingest_hash());

        let mut other_data = base.clone();
        other_data.sample_users = Some(5);
        assert_ne!(base.ingest_hash(), other_data.ingest_hash());
        assert_ne!(base.attack_hash(), other_data.attack_hash());
    }

    #[test]
    fn manifest_round_trips_and_gates_stages() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = RunManifest::load(dir.path()).unwrap();
        assert!(manifest.stages.is_empty());
        manifest.record("ingest", "abc".into(), vec!["corpus/snapshot.jsonl".into()]);
        manifest.save(dir.path()).unwrap();

        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        assert!(loaded.stage_matches("ingest", "abc"));
        assert!(!loaded.stage_matches("ingest", "other"));
        assert!(!loaded.stage_matches("attack", "abc"));
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let guard = LockGuard::acquire(dir.path()).unwrap();
        assert!(matches!(LockGuard::acquire(dir.path()), Err(PipelineError::Locked(_))));
        drop(guard);
        LockGuard::acquire(dir.path()).unwrap();
    }
}
