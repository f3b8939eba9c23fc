//! The four pipeline stages and the artifacts they exchange.
//!
//! Each stage reads only the previous stage's files plus the config, so a
//! run can stop and restart at any boundary. `run_all` chains them under a
//! single lock.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agents::{benign_item_memory, TemplateSet};
use crate::corpus::{self, CorpusStats, DatasetFormat, IngestStats, InteractionMatrix};
use crate::eval::{
    build_report, fluency_report, run_evaluation, write_report_files, EvalConfig, EvalReport,
    EvaluationResult, FluencyReport,
};
use crate::fixtures;
use crate::forge::{build_context, run_search, SearchConfig};
use crate::gateway::{build_backend, BackendConfig, LlmBackend, Role};
use crate::pipeline::{write_atomic, LockGuard, PipelineError, RunConfig, RunManifest};
use crate::strategy::{optimize_strategy, order_letters, UpdateLoopHarness};

pub const INGEST_SCHEMA: u32 = 1;
pub const ATTACK_SCHEMA: u32 = 1;
pub const EVAL_SCHEMA: u32 = 1;

/// What the ingest stage produced; also written to `corpus/stats.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub schema_version: u32,
    pub dataset: String,
    pub corpus: CorpusStats,
    pub dropped: IngestStats,
    pub snapshot: PathBuf,
}

/// The finished attack: a searched trigger plus the corruption block that
/// performed best against the victim, written to `attack/attack.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackArtifact {
    pub schema_version: u32,
    pub target_item: String,
    pub target_title: String,
    /// Winning promotion trigger from the evolutionary search.
    pub trigger: String,
    pub trigger_score: Option<f64>,
    pub search_epochs_run: usize,
    pub search_converged: bool,
    /// Strategy ordering as letters, e.g. `fcgns`.
    pub order: String,
    /// Fraction of trial personas whose memory update got stuck.
    pub drunk_rate: f64,
    pub orderings_evaluated: usize,
    pub early_stopped: bool,
    /// The full planted description: trigger plus composed strategy text.
    pub description: String,
}

/// Raw evaluation output for all arms, written to `eval/evaluation.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub schema_version: u32,
    pub target_item: String,
    pub target_title: String,
    pub config: EvalConfig,
    pub result: EvaluationResult,
    pub fluency: FluencyReport,
}

/// Everything `run_all` produced, for CLI display.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub ingest: IngestSummary,
    pub attack: AttackArtifact,
    pub report: EvalReport,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
}

/// Loads the dataset (or the built-in demo corpus), snapshots it under
/// `out_dir/corpus/`, and records corpus statistics.
pub fn run_ingest(cfg: &RunConfig) -> Result<IngestSummary, PipelineError> {
    cfg.validate()?;
    let out = cfg.out_dir();
    let _lock = LockGuard::acquire(&out)?;
    let mut manifest = RunManifest::load(&out)?;
    ingest_inner(cfg, &mut manifest).map(|(summary, _)| summary)
}

/// Runs the trigger search and strategy optimization against the snapshot,
/// writing checkpoints under `search/` and the result to `attack/`.
pub fn run_attack(cfg: &RunConfig) -> Result<AttackArtifact, PipelineError> {
    cfg.validate()?;
    let out = cfg.out_dir();
    let _lock = LockGuard::acquire(&out)?;
    let mut manifest = RunManifest::load(&out)?;
    attack_inner(cfg, &mut manifest)
}

/// Replays every user through all five arms and writes `eval/`.
pub fn run_evaluate(cfg: &RunConfig) -> Result<EvalArtifact, PipelineError> {
    cfg.validate()?;
    let out = cfg.out_dir();
    let _lock = LockGuard::acquire(&out)?;
    let mut manifest = RunManifest::load(&out)?;
    evaluate_inner(cfg, &mut manifest)
}

/// Validates the evaluation and renders `report/report.json` and `.csv`.
pub fn run_report(cfg: &RunConfig) -> Result<(EvalReport, PathBuf, PathBuf), PipelineError> {
    cfg.validate()?;
    let out = cfg.out_dir();
    let _lock = LockGuard::acquire(&out)?;
    let mut manifest = RunManifest::load(&out)?;
    report_inner(cfg, &mut manifest)
}

/// All four stages under one lock.
pub fn run_all(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let out = cfg.out_dir();
    let _lock = LockGuard::acquire(&out)?;
    let mut manifest = RunManifest::load(&out)?;
    let (ingest, _) = ingest_inner(cfg, &mut manifest)?;
    let attack = attack_inner(cfg, &mut manifest)?;
    evaluate_inner(cfg, &mut manifest)?;
    let (report, report_json, report_csv) = report_inner(cfg, &mut manifest)?;
    Ok(RunSummary { ingest, attack, report, report_json, report_csv })
}

fn ingest_inner(
    cfg: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<(IngestSummary, InteractionMatrix), PipelineError> {
    let out = cfg.out_dir();
    let (matrix, dropped) = match &cfg.dataset_path {
        None => (fixtures::demo_matrix(), IngestStats::default()),
        Some(path) => {
            let outcome = corpus::ingest(Path::new(path), cfg.dataset_format)?;
            (outcome.matrix, outcome.stats)
        }
    };
    let matrix = match cfg.sample_users {
        Some(count) => matrix.sample_subset(count, cfg.seed)?,
        None => matrix,
    };
    let snapshot = corpus::write_snapshot(&matrix, &out.join("corpus"))?;
    let summary = IngestSummary {
        schema_version: INGEST_SCHEMA,
        dataset: cfg.dataset_name.clone(),
        corpus: CorpusStats::of(&matrix),
        dropped,
        snapshot,
    };
    write_json(&out.join("corpus").join("stats.json"), &summary)?;
    manifest.record(
        "ingest",
        cfg.ingest_hash(),
        vec!["corpus/snapshot.jsonl".into(), "corpus/metadata.jsonl".into(), "corpus/stats.json".into()],
    );
    manifest.save(&out)?;
    Ok((summary, matrix))
}

fn attack_inner(
    cfg: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<AttackArtifact, PipelineError> {
    require_stage(manifest, "ingest", &cfg.ingest_hash())?;
    let out = cfg.out_dir();
    let matrix = load_snapshot(cfg)?;
    let templates = load_templates(cfg)?;

    let surrogate = backend_for(cfg, Role::Surrogate, &cfg.surrogate_endpoint)?;
    let auxiliary = backend_for(cfg, Role::Auxiliary, &cfg.auxiliary_endpoint)?;
    let victim = backend_for(cfg, Role::Victim, &cfg.victim_endpoint)?;

    let (target_title, target_categories) = {
        let meta = matrix.meta(&cfg.target_item)?;
        (meta.title.clone(), meta.categories.clone())
    };

    let ctx = build_context(&matrix, &cfg.target_item, auxiliary.as_ref(), &templates)?;
    let mut probes = vec![ctx.clone()];
    for name in ["probe_user_memory_1", "probe_user_memory_2"] {
        probes.push(ctx.with_user_memory(templates.render(name, &[])?));
    }

    let mut search_cfg = SearchConfig::for_target(&templates, &target_title)?;
    search_cfg.epochs = cfg.epochs;
    search_cfg.pool_size = cfg.pool_size;
    search_cfg.elite_count = cfg.elite_count;
    search_cfg.rng_seed = cfg.seed;
    search_cfg.length_limit_words = cfg.length_limit_words;
    search_cfg.convergence_patience = cfg.convergence_patience;

    let search_dir = out.join("search");
    let outcome = run_search(
        &ctx,
        &probes,
        &search_cfg,
        surrogate.as_ref(),
        auxiliary.as_ref(),
        &templates,
        Some(&search_dir),
    )?;
    write_json(&search_dir.join("winner.json"), &outcome)?;

    let base_memory = benign_item_memory(&templates, &target_title, &target_categories)?;
    let harness = UpdateLoopHarness::new(
        victim.as_ref(),
        &templates,
        target_title.clone(),
        base_memory,
        cfg.attack_max_rounds,
    )?;
    let optimized =
        optimize_strategy(&outcome.winner.text, &harness, &templates, cfg.trials_per_ordering)?;

    let artifact = AttackArtifact {
        schema_version: ATTACK_SCHEMA,
        target_item: cfg.target_item.clone(),
        target_title,
        trigger: outcome.winner.text.clone(),
        trigger_score: outcome.winner.score.as_finite(),
        search_epochs_run: outcome.epochs_run,
        search_converged: outcome.converged,
        order: order_letters(&optimized.best_order),
        drunk_rate: optimized.best_rate,
        orderings_evaluated: optimized.evaluated.len(),
        early_stopped: optimized.early_stopped,
        description: optimized.best_description,
    };
    write_json(&out.join("attack").join("attack.json"), &artifact)?;
    manifest.record(
        "attack",
        cfg.attack_hash(),
        vec!["search/winner.json".into(), "attack/attack.json".into()],
    );
    manifest.save(&out)?;
    Ok(artifact)
}

fn evaluate_inner(
    cfg: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<EvalArtifact, PipelineError> {
    require_stage(manifest, "attack", &cfg.attack_hash())?;
    let out = cfg.out_dir();
    let attack_path = out.join("attack").join("attack.json");
    let attack: AttackArtifact = read_json(&attack_path)?;
    if attack.schema_version != ATTACK_SCHEMA {
        return Err(PipelineError::BadArtifact {
            path: attack_path.display().to_string(),
            reason: format!("schema {} (this build reads {ATTACK_SCHEMA})", attack.schema_version),
        });
    }
    // The attack hash deliberately ignores the epoch budget so a longer run
    // can resume a shorter one; here the artifact must actually satisfy the
    // budget being evaluated. A search that converged early satisfies any
    // budget at or above where it stopped.
    let budget_satisfied = attack.search_epochs_run == cfg.epochs
        || (attack.search_converged && attack.search_epochs_run <= cfg.epochs);
    if !budget_satisfied {
        return Err(PipelineError::StaleStage { stage: "attack" });
    }

    let matrix = load_snapshot(cfg)?;
    let split = matrix.leave_one_out();
    let templates = load_templates(cfg)?;
    let victim = backend_for(cfg, Role::Victim, &cfg.victim_endpoint)?;
    let auxiliary = backend_for(cfg, Role::Auxiliary, &cfg.auxiliary_endpoint)?;
    let fluency_backend = backend_for(cfg, Role::Surrogate, &cfg.fluency_endpoint)?;

    let mut eval_cfg = EvalConfig::new(cfg.victim_flavor(), cfg.dataset_name.clone(), cfg.seed);
    eval_cfg.k_values = cfg.k_values.clone();
    eval_cfg.negatives = cfg.negatives;
    eval_cfg.utility_k = cfg.utility_k;
    eval_cfg.max_update_rounds = cfg.eval_max_rounds;

    let result = run_evaluation(
        &matrix,
        &split,
        &cfg.target_item,
        &attack.description,
        victim.as_ref(),
        auxiliary.as_ref(),
        &templates,
        &eval_cfg,
    )?;
    let fluency = fluency_report(&attack.trigger, fluency_backend.as_ref(), cfg.seed)?;

    let artifact = EvalArtifact {
        schema_version: EVAL_SCHEMA,
        target_item: attack.target_item,
        target_title: attack.target_title,
        config: eval_cfg,
        result,
        fluency,
    };
    write_json(&out.join("eval").join("evaluation.json"), &artifact)?;
    manifest.record("evaluate", cfg.eval_hash(), vec!["eval/evaluation.json".into()]);
    manifest.save(&out)?;
    Ok(artifact)
}

fn report_inner(
    cfg: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<(EvalReport, PathBuf, PathBuf), PipelineError> {
    require_stage(manifest, "evaluate", &cfg.eval_hash())?;
    let out = cfg.out_dir();
    let eval_path = out.join("eval").join("evaluation.json");
    let artifact: EvalArtifact = read_json(&eval_path)?;
    if artifact.schema_version != EVAL_SCHEMA {
        return Err(PipelineError::BadArtifact {
            path: eval_path.display().to_string(),
            reason: format!("schema {} (this build reads {EVAL_SCHEMA})", artifact.schema_version),
        });
    }
    let report = build_report(
        &artifact.config,
        &artifact.target_item,
        &artifact.target_title,
        &artifact.result,
        Some(artifact.fluency),
    )?;
    let (report_json, report_csv) = write_report_files(&out.join("report"), &report)?;
    manifest.record(
        "report",
        cfg.eval_hash(),
        vec!["report/report.json".into(), "report/report.csv".into()],
    );
    manifest.save(&out)?;
    Ok((report, report_json, report_csv))
}

fn require_stage(
    manifest: &RunManifest,
    stage: &'static str,
    hash: &str,
) -> Result<(), PipelineError> {
    if manifest.stage_matches(stage, hash) {
        Ok(())
    } else {
        Err(PipelineError::StaleStage { stage })
    }
}

fn load_snapshot(cfg: &RunConfig) -> Result<InteractionMatrix, PipelineError> {
    let path = cfg.out_dir().join("corpus").join("snapshot.jsonl");
    if !path.is_file() {
        return Err(PipelineError::StaleStage { stage: "ingest" });
    }
    Ok(corpus::ingest(&path, DatasetFormat::CanonicalJsonl)?.matrix)
}

fn load_templates(cfg: &RunConfig) -> Result<TemplateSet, PipelineError> {
    match &cfg.template_dir {
        Some(dir) => Ok(TemplateSet::with_overrides(Path::new(dir))?),
        None => Ok(TemplateSet::builtin()),
    }
}

fn backend_for(
    cfg: &RunConfig,
    role: Role,
    endpoint: &str,
) -> Result<Arc<dyn LlmBackend>, PipelineError> {
    let mut backend_cfg = BackendConfig::mock(role, cfg.seed);
    backend_cfg.endpoint = endpoint.to_string();
    if !backend_cfg.is_mock() {
        backend_cfg.model_name = cfg.model_name.clone();
        backend_cfg.api_key_env = cfg.api_key_env.clone();
    }
    Ok(build_backend(&backend_cfg)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| PipelineError::BadArtifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::BadArtifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Arm;

    fn demo_config(out_dir: &Path) -> RunConfig {
        RunConfig { out_dir: out_dir.display().to_string(), ..RunConfig::default() }
    }

    #[test]
    fn full_run_produces_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path());
        let summary = run_all(&cfg).unwrap();

        assert_eq!(summary.ingest.corpus.users, 10);
        assert!(summary.attack.search_converged);
        assert!(!summary.attack.trigger.is_empty());
        assert_eq!(summary.attack.order.len(), 5);
        assert_eq!(summary.report.arms.len(), Arm::ALL.len());
        assert!(summary.report_json.is_file());
        assert!(summary.report_csv.is_file());

        for artifact in [
            "corpus/snapshot.jsonl",
            "corpus/metadata.jsonl",
            "corpus/stats.json",
            "search/winner.json",
            "attack/attack.json",
            "eval/evaluation.json",
            "report/report.json",
            "report/report.csv",
        ] {
            assert!(dir.path().join(artifact).is_file(), "missing {artifact}");
        }

        let manifest = RunManifest::load(dir.path()).unwrap();
        for stage in ["ingest", "attack", "evaluate", "report"] {
            assert!(manifest.stages.contains_key(stage), "unrecorded {stage}");
        }
        // The lock is released once the run finishes.
        assert!(!dir.path().join(".lock").exists());
    }

    #[test]
    fn stages_refuse_to_run_out_of_order_or_across_configs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path());

        assert!(matches!(
            run_attack(&cfg),
            Err(PipelineError::StaleStage { stage: "ingest" })
        ));

        run_ingest(&cfg).unwrap();
        let mut reseeded = cfg.clone();
        reseeded.seed = 7;
        assert!(matches!(
            run_attack(&reseeded),
            Err(PipelineError::StaleStage { stage: "ingest" })
        ));
    }

    #[test]
    fn evaluate_checks_the_attack_satisfies_the_epoch_budget() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path());
        run_ingest(&cfg).unwrap();
        let attack = run_attack(&cfg).unwrap();
        assert!(attack.search_converged);
        assert!(attack.search_epochs_run < cfg.epochs);

        // A converged search satisfies any budget at or above its stop point.
        let mut higher = cfg.clone();
        higher.epochs = cfg.epochs + 17;
        run_evaluate(&higher).unwrap();

        // It does not satisfy a budget below where it stopped: a run capped
        // there would have produced a different winner.
        let mut lower = cfg.clone();
        lower.epochs = attack.search_epochs_run - 1;
        assert!(matches!(
            run_evaluate(&lower),
            Err(PipelineError::StaleStage { stage: "attack" })
        ));
    }
}
