use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pfedgate::checkpoint::dump_gates;
use pfedgate::config::RunConfig;
use pfedgate::experiment::{build, output_dir};

#[derive(Parser)]
#[command(
    name = "pfedgate",
    version,
    about = "Personalized federated learning with gated sparse model adaptation"
)]
#[command(after_help = "The output directory of `run` can be overridden with PFEDGATE_OUTPUT_DIR.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Parse and check a config file without running it.
    Validate { config: PathBuf },
    /// Print every client's gating parameters from a checkpoint as JSON.
    DumpGates {
        /// Checkpoint directory or its manifest.json.
        checkpoint: PathBuf,
    },
}

fn run(config: &Path) -> pfedgate::Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = output_dir(&cfg);
    let mut exp = build(&cfg)?;
    let summary = exp.run_to_dir(&dir)?;
    let f = &summary.final_scores;
    println!(
        "round {}: avg_acc={:.4} bottom_decile_acc={:.4} achieved_sparsity={:.4}",
        f.round, f.avg_acc, f.bottom_decile_acc, f.achieved_sparsity
    );
    if let Some(novel) = &summary.novel {
        println!(
            "novel clients: acc={:.4} participants={:.4} gap={:.4}",
            novel.novel_acc, novel.participant_acc, novel.gap
        );
    }
    println!("outputs written to {}", dir.display());
    Ok(())
}

fn validate(config: &Path) -> pfedgate::Result<()> {
    let cfg = RunConfig::load(config)?;
    // building also checks the data source and that every budget is feasible
    let exp = build(&cfg)?;
    let fed = &exp.federation;
    println!(
        "ok: method={} clients={} (novel {}) params={} blocks={} min_feasible_sparsity={:.4} hash={}",
        cfg.training.method.name(),
        fed.clients.len(),
        exp.novel.len(),
        fed.engine.spec.n_params(),
        fed.engine.partition.n_blocks(),
        fed.engine.partition.min_feasible_sparsity(),
        exp.config_hash
    );
    Ok(())
}

fn dump(checkpoint: &Path) -> pfedgate::Result<()> {
    let gates = dump_gates(checkpoint)?;
    println!("{}", serde_json::to_string(&gates)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => run(config),
        Command::Validate { config } => validate(config),
        Command::DumpGates { checkpoint } => dump(checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
