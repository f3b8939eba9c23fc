//! Report documents: one JSON file for machines, one CSV for spreadsheets.
//!
//! Reports carry no timestamps or environment detail — two runs with the
//! same inputs must produce byte-identical files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{ExposureMetrics, FluencyReport};
use super::simulate::{EvalConfig, EvaluationResult};
use super::{Arm, EvalError};
use crate::agents::VictimFlavor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One metric row at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetricsRow {
    pub k: u32,
    pub hit_rate: f64,
    pub ndcg: f64,
    pub users: usize,
    pub dropped: usize,
}

impl From<ExposureMetrics> for KMetricsRow {
    fn from(metrics: ExposureMetrics) -> Self {
        KMetricsRow {
            k: metrics.k,
            hit_rate: metrics.hit_rate,
            ndcg: metrics.ndcg,
            users: metrics.users,
            dropped: metrics.dropped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub exposure: Vec<KMetricsRow>,
    /// Held-out item hit rate — the "does it still recommend well" check.
    pub utility: KMetricsRow,
    pub users: usize,
    pub total_updates: usize,
    pub drunk_updates: usize,
    pub survived_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub dataset: String,
    pub victim: String,
    pub target_item: String,
    pub target_title: String,
    pub seed: u64,
    pub users_evaluated: usize,
    pub k_values: Vec<u32>,
    pub defense_applied: bool,
    /// Arms in canonical order: benign, noop, trivial, adversarial,
    /// paraphrased.
    pub arms: Vec<ArmReport>,
    pub fluency: Option<FluencyReport>,
}

/// Assembles the report document from an evaluation result.
pub fn build_report(
    cfg: &EvalConfig,
    target_item: &str,
    target_title: &str,
    result: &EvaluationResult,
    fluency: Option<FluencyReport>,
) -> Result<EvalReport, EvalError> {
    let mut arms = Vec::with_capacity(Arm::ALL.len());
    for arm in Arm::ALL {
        let outcome = result
            .arms
            .get(&arm)
            .ok_or_else(|| EvalError::BadReport(format!("arm {} missing", arm.as_str())))?;
        arms.push(ArmReport {
            arm: arm.as_str().to_string(),
            exposure: outcome.exposure.iter().copied().map(KMetricsRow::from).collect(),
            utility: KMetricsRow::from(outcome.utility),
            users: outcome.users,
            total_updates: outcome.total_updates,
            drunk_updates: outcome.drunk_updates,
            survived_users: outcome.survived_users,
        });
    }
    let users_evaluated = arms.first().map(|a| a.users).unwrap_or(0);
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset: cfg.dataset.clone(),
        victim: cfg.victim.as_str().to_string(),
        target_item: target_item.to_string(),
        target_title: target_title.to_string(),
        seed: cfg.seed,
        users_evaluated,
        k_values: cfg.k_values.clone(),
        defense_applied: result.defense_applied,
        arms,
        fluency,
    };
    validate_report(&report)?;
    Ok(report)
}

/// Structural and arithmetic sanity checks on a report document.
pub fn validate_report(report: &EvalReport) -> Result<(), EvalError> {
    let bad = |reason: String| Err(EvalError::BadReport(reason));
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return bad(format!(
            "schema_version {} (this build reads {REPORT_SCHEMA_VERSION})",
            report.schema_version
        ));
    }
    if report.victim.parse::<VictimFlavor>().is_err() {
        return bad(format!("unknown victim flavor '{}'", report.victim));
    }
    if report.k_values.is_empty() || !report.k_values.windows(2).all(|w| w[0] < w[1]) {
        return bad("k_values must be non-empty and strictly ascending".into());
    }
    if report.arms.len() != Arm::ALL.len() {
        return bad(format!("expected {} arms, found {}", Arm::ALL.len(), report.arms.len()));
    }
    for (arm, expected) in report.arms.iter().zip(Arm::ALL) {
        if arm.arm != expected.as_str() {
            return bad(format!("arm '{}' out of order (expected '{}')", arm.arm, expected.as_str()));
        }
        if arm.exposure.len() != report.k_values.len() {
            return bad(format!("arm '{}' has {} exposure rows for {} cutoffs", arm.arm, arm.exposure.len(), report.k_values.len()));
        }
        for (row, &k) in arm.exposure.iter().zip(&report.k_values) {
            if row.k != k {
                return bad(format!("arm '{}' exposure row k={} does not match cutoff {k}", arm.arm, row.k));
            }
            check_row(&arm.arm, row, report.users_evaluated)?;
        }
        check_row(&arm.arm, &arm.utility, report.users_evaluated)?;
        if arm.users != report.users_evaluated {
            return bad(format!("arm '{}' evaluated {} users, report says {}", arm.arm, arm.users, report.users_evaluated));
        }
        if arm.survived_users > arm.users {
            return bad(format!("arm '{}' has more survivors than users", arm.arm));
        }
        if arm.drunk_updates > arm.total_updates {
            return bad(format!("arm '{}' has more drunk updates than updates", arm.arm));
        }
    }
    if let Some(fluency) = &report.fluency {
        if !(fluency.trigger_perplexity >= 1.0 && fluency.shuffled_perplexity >= 1.0) {
            return bad("perplexities below 1 are impossible".into());
        }
    }
    Ok(())
}

fn check_row(arm: &str, row: &KMetricsRow, users_evaluated: usize) -> Result<(), EvalError> {
    let bad = |reason: String| Err(EvalError::BadReport(reason));
    if !(0.0..=1.0).contains(&row.hit_rate) {
        return bad(format!("arm '{arm}' hit_rate {} out of range", row.hit_rate));
    }
    if row.ndcg < 0.0 || row.ndcg > row.hit_rate + 1e-12 {
        return bad(format!(
            "arm '{arm}' ndcg {} exceeds hit rate {} (single relevant item)",
            row.ndcg, row.hit_rate
        ));
    }
    if row.users + row.dropped != users_evaluated {
        return bad(format!(
            "arm '{arm}' counted {} users and dropped {}, but {} were evaluated",
            row.users, row.dropped, users_evaluated
        ));
    }
    Ok(())
}

/// Flat CSV: one row per (arm, cutoff).
pub fn to_csv(report: &EvalReport) -> Result<String, EvalError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["attack", "victim", "dataset", "k", "hit_rate", "ndcg", "users", "dropped"])?;
    for arm in &report.arms {
        for row in &arm.exposure {
            writer.write_record([
                arm.arm.as_str(),
                report.victim.as_str(),
                report.dataset.as_str(),
                &row.k.to_string(),
                &format!("{:.6}", row.hit_rate),
                &format!("{:.6}", row.ndcg),
                &row.users.to_string(),
                &row.dropped.to_string(),
            ])?;
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| EvalError::BadReport(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| EvalError::BadReport(format!("csv utf-8: {e}")))
}

/// Writes `report.json` and `report.csv` into `dir`, creating it if needed.
pub fn write_report_files(dir: &Path, report: &EvalReport) -> Result<(PathBuf, PathBuf), EvalError> {
    validate_report(report)?;
    let io = |source: std::io::Error, path: &Path| EvalError::ReportIo {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report).expect("report serialises");
    json.push('\n');
    std::fs::write(&json_path, json).map_err(|e| io(e, &json_path))?;
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, to_csv(report)?).map_err(|e| io(e, &csv_path))?;
    Ok((json_path, csv_path))
}
