//! Command-line front end: generate synthetic datasets, train adaptation
//! methods, evaluate checkpoints, and run the full experiment matrix.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adapose::cli::{cmd_eval, cmd_gen, cmd_matrix, cmd_train, CliError, ModelRef, Task};
use adapose::trainer::Method;

#[derive(Parser)]
#[command(name = "adapose", about = "Synthetic CSI domain-adaptation lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/eval CSID datasets for both scenes.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's data directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train one (task, method) cell.
    Train {
        #[arg(long)]
        spec: PathBuf,
        /// A2B or B2A.
        #[arg(long)]
        task: String,
        /// source_only | mmd_feature_align | adapose | adapose_feat_only | adapose_out_only.
        #[arg(long)]
        method: String,
        #[arg(long)]
        label_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled dataset; writes CSV and JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output path stem; `.csv` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
        /// Model preset name.
        #[arg(long, default_value = "desk")]
        model: String,
        #[arg(long, default_value = "-")]
        task: String,
        #[arg(long, default_value = "-")]
        method: String,
    },
    /// Run tasks x methods x seeds and write combined tables.
    Matrix {
        #[arg(long)]
        spec: PathBuf,
        /// Comma-separated task list.
        #[arg(long, default_value = "A2B,B2A")]
        tasks: String,
        /// Comma-separated method list; defaults to all five.
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    Method::by_name(s)
        .ok_or_else(|| CliError::Usage(format!("unknown method {s:?}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { spec, out_dir } => {
            let manifest = cmd_gen(&spec, out_dir.as_deref())?;
            println!("generated {:?} (spec {})", manifest.files, manifest.spec_hash);
        }
        Command::Train { spec, task, method, label_fraction, seed, data_dir, out_dir } => {
            let artifacts = cmd_train(
                &spec,
                Task::parse(&task)?,
                parse_method(&method)?,
                label_fraction,
                seed,
                data_dir.as_deref(),
                out_dir.as_deref(),
            )?;
            println!(
                "checkpoint: {}\nlog: {}",
                artifacts.checkpoint.display(),
                artifacts.log.display()
            );
        }
        Command::Eval { checkpoint, dataset, out, model, task, method } => {
            let eval = cmd_eval(
                &checkpoint,
                &dataset,
                &out,
                &ModelRef::Preset(model),
                &task,
                &method,
            )?;
            for (t, f) in eval.report.thresholds.iter().zip(&eval.report.fractions) {
                println!("pck@{t:.0}: {:.2}%", f * 100.0);
            }
        }
        Command::Matrix { spec, tasks, methods, seeds, data_dir, out_dir } => {
            let tasks = tasks
                .split(',')
                .map(Task::parse)
                .collect::<Result<Vec<_>, _>>()?;
            let methods = match methods {
                Some(list) => list
                    .split(',')
                    .map(parse_method)
                    .collect::<Result<Vec<_>, _>>()?,
                None => Method::ALL.to_vec(),
            };
            let seeds = seeds
                .split(',')
                .map(|s| s.parse::<u64>().map_err(|e| CliError::Usage(format!("bad seed {s:?}: {e}"))))
                .collect::<Result<Vec<u64>, _>>()?;
            let report = cmd_matrix(
                &spec,
                &tasks,
                &methods,
                &seeds,
                data_dir.as_deref(),
                out_dir.as_deref(),
            )?;
            for row in &report.averaged {
                let pck50 = row.report.fraction_at(50.0).unwrap_or(f64::NAN);
                println!("{} {}: pck@50 {:.2}%", row.task, row.method, pck50 * 100.0);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
