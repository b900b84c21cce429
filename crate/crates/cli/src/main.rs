//! Command-line entry point. Every subcommand reads one TOML config; the
//! --seed flag overrides the config's root seed. Errors print a single
//! machine-parseable line (`error class=<class>: <message>`) and exit
//! nonzero.

use clap::{Parser, Subcommand};
use gpmil_cli::commands::{
    cmd_ablate, cmd_eval, cmd_export_attention, cmd_gen_data, cmd_gradcheck, cmd_train,
    SplitChoice,
};
use gpmil_cli::config::RunConfig;
use gpmil_cli::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gpmil",
    about = "Probabilistic attention MIL with a sparse-GP posterior: synthetic data, training, evaluation, ablations"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "gpmil.toml")]
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Also write the JSON-lines debug variant.
        #[arg(long)]
        jsonl: bool,
    },
    /// Train on the config's train split of a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a saved model on one split of a dataset file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitChoice,
    },
    /// Sweep the ablation grid (linear mean x normalization x diagonal x
    /// inducing counts) over several seeds.
    Ablate {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Export per-instance attention statistics as CSV.
    ExportAttention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify gradients against finite differences on the standard fixture.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Negative control: tamper the analytic gradient; the check must fail.
        #[arg(long)]
        inject_bug: bool,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::Io)?;
    let mut config = RunConfig::from_toml(&text).map_err(CliError::Config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::GenData { out, jsonl } => {
            let summary = cmd_gen_data(&config, &out, jsonl)?;
            println!(
                "wrote {} bags to {} (per-class: {:?})",
                summary.n_bags,
                summary.out_path.display(),
                summary.class_counts
            );
        }
        Command::Train { data, out_dir } => {
            let summary = cmd_train(&config, &data, &out_dir)?;
            println!(
                "trained {} steps; final mean loss {:.4}; model at {}",
                summary.n_steps,
                summary.final_mean_loss,
                summary.model_path.display()
            );
            if let (Some(acc), Some(auc)) = (summary.final_val_acc, summary.final_val_auc) {
                println!("val balanced_acc {acc:.4}, val auc {auc:.4}");
            }
        }
        Command::Eval {
            model,
            data,
            out_dir,
            split,
        } => {
            let report = cmd_eval(&config, &model, &data, &out_dir, split)?;
            print!("{}", report.to_text());
        }
        Command::Ablate { out_dir } => {
            let rows = cmd_ablate(&config, &out_dir)?;
            println!(
                "{} cells x {} seeds written to {}",
                rows.len(),
                config.ablate.n_seeds,
                out_dir.join("ablation.csv").display()
            );
            for r in &rows {
                println!(
                    "lm={} {} diag={} m={}: acc {:.3}+-{:.3} auc {:.3}+-{:.3}",
                    r.use_lm,
                    r.normalization,
                    r.diag_only,
                    r.n_inducing,
                    r.balanced_acc.0,
                    r.balanced_acc.1,
                    r.auc.0,
                    r.auc.1
                );
            }
        }
        Command::ExportAttention { model, data, out } => {
            let rows = cmd_export_attention(&config, &model, &data, &out)?;
            println!("wrote {rows} instance rows to {}", out.display());
        }
        Command::Gradcheck { seeds, inject_bug } => {
            let summary = cmd_gradcheck(&config, seeds, inject_bug)?;
            for (seed, report) in &summary.reports {
                println!("seed {seed}:");
                print!("{}", report.to_text());
            }
            if !summary.passed {
                return Err(CliError::Config("gradient check failed".into()));
            }
            println!("all {seeds} seeds passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error class={}: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
