//! Command-line front end: dataset generation, source pretraining, target
//! adaptation, evaluation, ablations, sweeps, and embedding dumps.
//!
//! Exit codes: 0 on success, 2 for configuration/input problems, 3 for
//! numeric failures.

use cac_core::config::TrainConfig;
use cac_core::data::{generate_two_domain_blobs, read_csv, write_csv, DomainTag};
use cac_core::error::{CacError, Result};
use cac_core::harness::{
    adapt_target, dump_embeddings, evaluate, pretrain_source, run_ablation, sweep_param,
    write_ablation_csv, write_sweep_csv, RunMetricsFile, SweepParam,
};
use cac_core::model::{load_model, save_model};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "cac",
    about = "Source-free domain adaptation via neighborhood-pair contrast on synthetic benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source/target benchmark CSVs described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_source: PathBuf,
        #[arg(long)]
        out_target: PathBuf,
    },
    /// Pretrain on the labeled source domain and save the model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained model to the unlabeled target domain.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained model to start from.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSON: final report, per-step loss records, run metadata.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a saved model on a dataset CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the four-variant component ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep K or beta over a grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// K or beta.
        #[arg(long)]
        param: String,
        /// Comma-separated grid values, e.g. 1,2,3.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump extractor features with labels and predictions.
    Dump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out_source,
            out_target,
        } => {
            let config = TrainConfig::from_json_file(&config)?;
            let (source, target) = generate_two_domain_blobs(&config.shift)?;
            write_csv(&source, &out_source)?;
            write_csv(&target, &out_target)?;
            println!(
                "wrote {} source rows to {} and {} target rows to {}",
                source.len(),
                out_source.display(),
                target.len(),
                out_target.display()
            );
        }
        Command::Pretrain { config, out } => {
            let config = TrainConfig::from_json_file(&config)?;
            let (source, _) = generate_two_domain_blobs(&config.shift)?;
            let model = pretrain_source(&config, &source)?;
            let report = evaluate(&model, &source)?;
            save_model(&model, &out)?;
            println!(
                "pretrained {} epochs, source avg accuracy {:.2}%, model saved to {}",
                config.pretrain_epochs,
                report.avg,
                out.display()
            );
        }
        Command::Adapt {
            config,
            model,
            out,
            metrics,
        } => {
            let config = TrainConfig::from_json_file(&config)?;
            let model = load_model(&model)?;
            let (_, target) = generate_two_domain_blobs(&config.shift)?;
            let start = Instant::now();
            let outcome = adapt_target(model, &target, &config)?;
            let wall = start.elapsed().as_secs_f64();
            save_model(&outcome.model, &out)?;
            if let Some(metrics_path) = metrics {
                let file = RunMetricsFile {
                    config_hash: config.hash(),
                    seed: config.seed,
                    wall_clock_seconds: wall,
                    report: outcome.report.clone(),
                    steps: outcome.steps,
                };
                std::fs::write(&metrics_path, serde_json::to_string_pretty(&file)?)?;
            }
            println!(
                "adapted {} epochs in {:.2}s, target avg accuracy {:.2}%, model saved to {}",
                config.adapt_epochs,
                wall,
                outcome.report.avg,
                out.display()
            );
        }
        Command::Eval { model, data } => {
            let model = load_model(&model)?;
            let dataset = read_csv(&data, DomainTag::Target, Some(model.classes()))?;
            let report = evaluate(&model, &dataset)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { config, out } => {
            let config = TrainConfig::from_json_file(&config)?;
            let rows = run_ablation(&config)?;
            write_ablation_csv(&rows, &out)?;
            for row in &rows {
                println!(
                    "{:<14} {:6.2} +/- {:.2}",
                    row.variant, row.mean_final_avg, row.std_final_avg
                );
            }
            println!("table written to {}", out.display());
        }
        Command::Sweep {
            config,
            param,
            grid,
            out,
        } => {
            let config = TrainConfig::from_json_file(&config)?;
            let param: SweepParam = param.parse()?;
            let grid: Vec<f64> = grid
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CacError::Config(format!("bad grid value {v:?}")))
                })
                .collect::<Result<_>>()?;
            let rows = sweep_param(&config, param, &grid)?;
            write_sweep_csv(&rows, param, &out)?;
            for row in &rows {
                println!(
                    "{:8.3} -> {:6.2} +/- {:.2}",
                    row.value, row.mean_final_avg, row.std_final_avg
                );
            }
            println!("table written to {}", out.display());
        }
        Command::Dump { model, data, out } => {
            let model = load_model(&model)?;
            let dataset = read_csv(&data, DomainTag::Target, Some(model.classes()))?;
            dump_embeddings(&model, &dataset, &out)?;
            println!("wrote {} embedding rows to {}", dataset.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
