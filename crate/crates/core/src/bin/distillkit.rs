use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use distillkit::cli::{self, CliError};
use distillkit::data::{Occlusion, SplitName, SyntheticTask};

#[derive(Parser)]
#[command(name = "distillkit", version, about = "Teacher-student distillation under half-face occlusion")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Expression,
    Gender,
    Age,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum OcclusionArg {
    None,
    Upper,
    Lower,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the directory layout.
    GenData {
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Classes for the expression task.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three-stage curriculum described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Runs are written to `<out>/<run_id>/`.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Overrides the config seed and DISTILLKIT_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Print per-epoch progress to stderr.
        #[arg(short, long)]
        verbose: bool,
    },
    /// Tabulate runs against a baseline with McNemar p-values.
    Compare {
        /// Baseline as `RUN_DIR[:MODEL]`.
        #[arg(long)]
        baseline: String,
        /// CSV output path; the pretty table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Runs as `RUN_DIR[:MODEL]`; the model defaults to `distilled`.
        #[arg(required = true)]
        runs: Vec<String>,
    },
    /// Dump penultimate activations of a trained model as CSV.
    ExportEmbeddings {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "distilled")]
        model: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Defaults to the run's stage-2 occlusion.
        #[arg(long, value_enum)]
        occlusion: Option<OcclusionArg>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            task,
            classes,
            n,
            noise,
            seed,
            out,
        } => {
            let task = match task {
                TaskArg::Expression => SyntheticTask::Expression { num_classes: classes },
                TaskArg::Gender => SyntheticTask::Gender,
                TaskArg::Age => SyntheticTask::Age,
            };
            let hash = cli::cmd_gen_data(task, n, noise, seed, &out)?;
            println!("wrote {n} samples to {} (dataset {hash})", out.display());
        }
        Command::Run {
            config,
            out,
            seed,
            verbose,
        } => {
            let outcome = cli::cmd_run(&config, &out, seed, verbose)?;
            for (name, report) in &outcome.report.models {
                let metrics: Vec<String> = report.metrics.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
                println!("{name:<18} {}", metrics.join("  "));
            }
            println!("report: {}", outcome.out_dir.join("report.json").display());
        }
        Command::Compare { baseline, out, runs } => {
            let runs: Vec<_> = runs.iter().map(|r| cli::parse_run_ref(r)).collect();
            let table = cli::cmd_compare(&runs, &cli::parse_run_ref(&baseline))?;
            if let Some(path) = out {
                std::fs::write(&path, table.to_csv()).map_err(|e| CliError::Io {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
            }
            print!("{}", table.to_pretty());
        }
        Command::ExportEmbeddings {
            run,
            model,
            split,
            occlusion,
            out,
        } => {
            let split = match split {
                SplitArg::Train => SplitName::Train,
                SplitArg::Validation => SplitName::Validation,
                SplitArg::Test => SplitName::Test,
            };
            let occlusion = occlusion.map(|o| match o {
                OcclusionArg::None => Occlusion::None,
                OcclusionArg::Upper => Occlusion::UpperHalfHidden,
                OcclusionArg::Lower => Occlusion::LowerHalfHidden,
            });
            let rows = cli::cmd_export_embeddings(&run, &model, split, occlusion, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Args::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
