//! Attack evaluation: arm-by-arm victim simulation, exposure and utility
//! metrics, fluency measurements, and report files.
//!
//! Every run evaluates five arms over the same users and the same candidate
//! shuffles: `benign` (the stock description), `noop` (the stock description
//! pushed through the insertion path — a control that must change nothing),
//! `trivial` (a naive promotional tail), `adversarial` (the optimised planted
//! description), and `paraphrased` (the adversarial description after the
//! paraphrase defense).

pub mod metrics;
pub mod report;
pub mod simulate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::templates::TemplateError;
use crate::agents::VictimError;
use crate::corpus::CorpusError;
use crate::gateway::GatewayError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    EmptyEvaluation(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("report is invalid: {0}")]
    BadReport(String),
    #[error("report io on {path}: {source}")]
    ReportIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv encoding: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// One evaluation arm: which description is planted for the target item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Stock catalogue description; the baseline.
    Benign,
    /// The stock description sent through the same insertion path as the
    /// attack. Must be indistinguishable from `Benign`.
    Noop,
    /// Stock description plus a naive unoptimised promotional tail.
    Trivial,
    /// The optimised trigger plus corruption block.
    Adversarial,
    /// The adversarial description after the paraphrase defense.
    Paraphrased,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Benign, Arm::Noop, Arm::Trivial, Arm::Adversarial, Arm::Paraphrased];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Benign => "benign",
            Arm::Noop => "noop",
            Arm::Trivial => "trivial",
            Arm::Adversarial => "adversarial",
            Arm::Paraphrased => "paraphrased",
        }
    }
}

pub use metrics::{exposure_metrics, fluency_report, ExposureMetrics, FluencyReport, RankOutcome};
pub use report::{build_report, validate_report, write_report_files, ArmReport, EvalReport, KMetricsRow};
pub use simulate::{
    paraphrase_defense, run_arm, run_evaluation, trivial_insertion, ArmOutcome, EvalConfig,
    EvaluationResult,
};
