//! `tipsy` — drive the attack/evaluation pipeline from the command line.
//!
//! Exit codes: 0 success, 2 configuration or artifact problems, 3 backend
//! failures, 4 evaluation failures.

use std::error::Error as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tipsy::corpus::DatasetFormat;
use tipsy::eval::EvalReport;
use tipsy::pipeline::{stages, PipelineError, RunConfig};

#[derive(Parser)]
#[command(
    name = "tipsy",
    version,
    about = "Adversarial testbed for memory-bearing LLM recommender agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset and snapshot it into the output directory.
    Ingest(StageArgs),
    /// Search for a trigger and optimize the memory-corruption strategy.
    Attack(StageArgs),
    /// Replay every user through all evaluation arms.
    Evaluate(StageArgs),
    /// Render report files from the evaluation artifact.
    Report(StageArgs),
    /// Run every stage in order.
    All(StageArgs),
    /// Print the effective configuration as JSON and exit.
    Config(StageArgs),
}

impl Command {
    fn args(&self) -> &StageArgs {
        match self {
            Command::Ingest(a)
            | Command::Attack(a)
            | Command::Evaluate(a)
            | Command::Report(a)
            | Command::All(a)
            | Command::Config(a) => a,
        }
    }
}

#[derive(Args)]
struct StageArgs {
    /// JSON config file; the flags below override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory artifacts are written to.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<String>,
    /// Master seed for every derived RNG stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Item id the attack promotes.
    #[arg(long, value_name = "ITEM")]
    target: Option<String>,
    /// Victim flavor: cf, rag, or seq.
    #[arg(long)]
    victim: Option<String>,
    /// Interaction file to ingest instead of the built-in demo corpus.
    #[arg(long, value_name = "FILE")]
    dataset: Option<String>,
    /// Dataset layout: amazon-jsonl, generic-csv, or canonical-jsonl.
    #[arg(long, value_name = "FORMAT")]
    dataset_format: Option<String>,
    /// Evaluate a seeded random subset of this many users.
    #[arg(long, value_name = "N")]
    sample_users: Option<usize>,
    /// Search epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Trigger candidate pool size.
    #[arg(long)]
    pool_size: Option<usize>,
    /// Elites kept per epoch.
    #[arg(long)]
    elites: Option<usize>,
    /// Word budget for candidate triggers.
    #[arg(long, value_name = "WORDS")]
    length_limit: Option<usize>,
    /// Force every backend onto the offline mock.
    #[arg(long)]
    mock: bool,
}

impl StageArgs {
    fn effective_config(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.target {
            cfg.target_item = v.clone();
        }
        if let Some(v) = &self.victim {
            cfg.victim = v.clone();
        }
        if let Some(v) = &self.dataset {
            cfg.dataset_path = Some(v.clone());
        }
        if let Some(v) = &self.dataset_format {
            cfg.dataset_format = parse_format(v)?;
        }
        if let Some(v) = self.sample_users {
            cfg.sample_users = Some(v);
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.pool_size {
            cfg.pool_size = v;
        }
        if let Some(v) = self.elites {
            cfg.elite_count = v;
        }
        if let Some(v) = self.length_limit {
            cfg.length_limit_words = v;
        }
        if self.mock {
            cfg.victim_endpoint = "mock".into();
            cfg.surrogate_endpoint = "mock".into();
            cfg.auxiliary_endpoint = "mock".into();
            cfg.fluency_endpoint = "mock:fluency".into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_format(name: &str) -> Result<DatasetFormat, PipelineError> {
    match name {
        "amazon-jsonl" => Ok(DatasetFormat::AmazonJsonl),
        "generic-csv" => Ok(DatasetFormat::GenericCsv),
        "canonical-jsonl" => Ok(DatasetFormat::CanonicalJsonl),
        other => Err(PipelineError::Config(format!(
            "dataset format must be amazon-jsonl, generic-csv, or canonical-jsonl (got '{other}')"
        ))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = err.source();
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code().clamp(0, 255) as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = cli.command.args().effective_config()?;
    match &cli.command {
        Command::Ingest(_) => {
            let summary = stages::run_ingest(&cfg)?;
            println!(
                "ingested '{}': {} interactions, {} users x {} items, sparsity {:.4}",
                summary.dataset,
                summary.corpus.interactions,
                summary.corpus.users,
                summary.corpus.items,
                summary.corpus.sparsity,
            );
            let dropped =
                summary.dropped.malformed + summary.dropped.duplicates + summary.dropped.zero_valued;
            if dropped > 0 {
                println!(
                    "dropped {} records ({} malformed, {} duplicate, {} zero-valued)",
                    dropped,
                    summary.dropped.malformed,
                    summary.dropped.duplicates,
                    summary.dropped.zero_valued,
                );
            }
            println!("snapshot: {}", summary.snapshot.display());
        }
        Command::Attack(_) => {
            let artifact = stages::run_attack(&cfg)?;
            print_attack(&artifact);
        }
        Command::Evaluate(_) => {
            let artifact = stages::run_evaluate(&cfg)?;
            println!("evaluated {} arms on '{}':", artifact.result.arms.len(), artifact.target_title);
            for (arm, outcome) in &artifact.result.arms {
                let first = outcome.exposure.first().expect("at least one cutoff");
                println!(
                    "  {:<12} HR@{} {:.3}  NDCG@{} {:.3}  drunk {}/{}",
                    arm.as_str(),
                    first.k,
                    first.hit_rate,
                    first.k,
                    first.ndcg,
                    outcome.drunk_updates,
                    outcome.total_updates,
                );
            }
        }
        Command::Report(_) => {
            let (report, json_path, csv_path) = stages::run_report(&cfg)?;
            print_report(&report);
            println!("written: {} and {}", json_path.display(), csv_path.display());
        }
        Command::All(_) => {
            let summary = stages::run_all(&cfg)?;
            print_attack(&summary.attack);
            print_report(&summary.report);
            println!(
                "written: {} and {}",
                summary.report_json.display(),
                summary.report_csv.display(),
            );
        }
        Command::Config(_) => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serialises"));
        }
    }
    Ok(())
}

fn print_attack(artifact: &stages::AttackArtifact) {
    println!(
        "trigger after {} epochs{}: {}",
        artifact.search_epochs_run,
        if artifact.search_converged { " (converged)" } else { "" },
        artifact.trigger,
    );
    println!(
        "strategy order '{}': drunk rate {:.2} ({} ordering{} evaluated{})",
        artifact.order,
        artifact.drunk_rate,
        artifact.orderings_evaluated,
        if artifact.orderings_evaluated == 1 { "" } else { "s" },
        if artifact.early_stopped { ", stopped early" } else { "" },
    );
}

fn print_report(report: &EvalReport) {
    println!(
        "report for '{}' ({} victim, {} users):",
        report.target_title, report.victim, report.users_evaluated,
    );
    for arm in &report.arms {
        let first = arm.exposure.first().expect("at least one cutoff");
        println!(
            "  {:<12} HR@{} {:.3}  NDCG@{} {:.3}  utility@{} {:.3}  survived {}/{}",
            arm.arm,
            first.k,
            first.hit_rate,
            first.k,
            first.ndcg,
            arm.utility.k,
            arm.utility.hit_rate,
            arm.survived_users,
            arm.users,
        );
    }
    if let Some(fluency) = &report.fluency {
        println!(
            "trigger perplexity {:.2} vs shuffled {:.2}",
            fluency.trigger_perplexity, fluency.shuffled_perplexity,
        );
    }
}
