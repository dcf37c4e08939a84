use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ant_core::eval::{self, ExperimentConfig};
use ant_core::Result;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Runs one stage (or all) of the condition-aware ABR experiment.
#[derive(Parser)]
#[command(name = "ant", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the seed of every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON experiment config. Without it a built-in preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Artifact directory shared by all stages.
    #[arg(long, global = true, default_value = "ant-out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-width networks and full training budgets.
    Full,
    /// Narrow networks that finish in minutes on one core.
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise the trace corpus and its train/test split.
    Corpus,
    /// Sweep k, fit K-means and label segments and traces.
    Cluster,
    /// Train the condition classifier.
    TrainClassifier,
    /// Train the General policy and one policy per condition.
    TrainZoo,
    /// Play every configured policy over the test traces.
    Evaluate,
    /// Aggregate episode logs into summary tables and CDFs.
    Report,
    /// Run every stage in order.
    Run,
    /// Print the effective config as JSON.
    ShowConfig,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => match cli.preset {
            Preset::Full => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk(),
        },
    };
    let cfg = match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = config(cli)?;
    let out: &Path = &cli.out;
    Ok(match cli.command {
        Command::Corpus => {
            let m = eval::cmd_corpus(&cfg, out)?;
            json!({ "stage": "corpus", "traces": m.traces.len() })
        }
        Command::Cluster => {
            let a = eval::cmd_cluster(&cfg, out)?;
            json!({ "stage": "cluster", "k": a.model.k, "sweep": a.sweep.entries })
        }
        Command::TrainClassifier => {
            let (_, r) = eval::cmd_train_classifier(&cfg, out)?;
            json!({
                "stage": "train-classifier",
                "epochs": r.epochs,
                "validation_accuracy": r.final_accuracy,
            })
        }
        Command::TrainZoo => {
            let (zoo, outcomes) = eval::cmd_train_zoo(&cfg, out)?;
            json!({
                "stage": "train-zoo",
                "models": zoo.labels().len(),
                "best_validation_qoe": outcomes.iter().map(|o| o.best_validation_qoe).collect::<Vec<_>>(),
            })
        }
        Command::Evaluate => {
            let episodes = eval::cmd_evaluate(&cfg, out)?;
            json!({ "stage": "evaluate", "episodes": episodes.len() })
        }
        Command::Report => report_json(&eval::cmd_report(&cfg, out)?),
        Command::Run => report_json(&eval::run_pipeline(&cfg, out)?),
        Command::ShowConfig => serde_json::to_value(&cfg).expect("config serialises"),
    })
}

fn report_json(summary: &eval::EvalSummary) -> serde_json::Value {
    let rows: Vec<_> = summary
        .rows
        .iter()
        .map(|r| json!({ "policy": r.policy, "mean_qoe": r.mean_qoe }))
        .collect();
    json!({ "stage": "report", "rows": rows })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", json!({ "error": err.kind(), "message": err.to_string() }));
            ExitCode::FAILURE
        }
    }
}
