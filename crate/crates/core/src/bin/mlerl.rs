use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mlerl::config::RunConfig;
use mlerl::envs::{
    make_duration_bandit, make_staged_failure_task, make_tabular_task, GeneratedTask, TabularKind,
};
use mlerl::orchestrator::{evaluate, train};
use mlerl::{Result, TaskSpec};

#[derive(Parser)]
#[command(
    name = "mlerl",
    version,
    about = "Duration-aware RL training for program-writing agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy on every task under a task root.
    Train {
        /// Flat key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task_dir: PathBuf,
        /// Output directory for metrics.csv and checkpoints.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Only train on these task ids (repeatable).
        #[arg(long = "task")]
        tasks: Vec<String>,
        #[arg(long)]
        no_duration_weighting: bool,
        #[arg(long)]
        no_instrumentation: bool,
        #[arg(long)]
        no_self_improve: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra key=value overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Grade scratch and improve samples from a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Root directory containing the task.
        #[arg(long)]
        task_dir: PathBuf,
        #[arg(long, default_value_t = 128)]
        n_samples: usize,
    },
    /// Generate a synthetic task directory.
    MakeEnv {
        #[arg(long, value_enum)]
        kind: EnvKind,
        /// Task directory to create; its name becomes the task id.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bandit: fast arm duration in seconds.
        #[arg(long, default_value_t = 0.05)]
        dt_fast: f64,
        /// Bandit: slow arm duration in seconds.
        #[arg(long, default_value_t = 0.2)]
        dt_slow: f64,
        /// Bandit: fast arm accuracy.
        #[arg(long, default_value_t = 0.3)]
        r_fast: f64,
        /// Bandit: slow arm accuracy.
        #[arg(long, default_value_t = 0.9)]
        r_slow: f64,
        /// Staged: options per stage slot.
        #[arg(long, default_value_t = 3)]
        n_actions: usize,
        /// Tabular: regression or classification.
        #[arg(long, value_enum, default_value_t = Tabular::Regression)]
        tabular: Tabular,
        #[arg(long, default_value_t = 200)]
        rows: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Bandit,
    Staged,
    Tabular,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tabular {
    Regression,
    Classification,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            task_dir,
            out,
            tasks,
            no_duration_weighting,
            no_instrumentation,
            no_self_improve,
            seed,
            overrides,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| mlerl::Error::Config(format!("`{kv}` is not KEY=VALUE")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.duration_weighting &= !no_duration_weighting;
            cfg.instrumentation &= !no_instrumentation;
            cfg.self_improve &= !no_self_improve;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut specs = TaskSpec::discover(&task_dir)?;
            if !tasks.is_empty() {
                specs.retain(|t| tasks.contains(&t.task_id));
            }
            let summary = train(cfg, specs, &out)?;
            if let Some(last) = summary.metrics.last() {
                println!("{}", mlerl::orchestrator::METRICS_HEADER);
                println!("{}", last.csv_row());
            }
            println!("final checkpoint: {}", summary.final_checkpoint.display());
        }
        Command::Evaluate {
            checkpoint,
            task,
            task_dir,
            n_samples,
        } => {
            let report = evaluate(&checkpoint, &task_dir, &task, n_samples)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::MakeEnv {
            kind,
            out,
            seed,
            dt_fast,
            dt_slow,
            r_fast,
            r_slow,
            n_actions,
            tabular,
            rows,
            noise,
        } => {
            let generated: GeneratedTask = match kind {
                EnvKind::Bandit => make_duration_bandit(&out, dt_fast, dt_slow, r_fast, r_slow)?,
                EnvKind::Staged => make_staged_failure_task(&out, n_actions, seed)?,
                EnvKind::Tabular => {
                    let k = match tabular {
                        Tabular::Regression => TabularKind::Regression,
                        Tabular::Classification => TabularKind::Classification,
                    };
                    make_tabular_task(&out, k, seed, rows, noise)?
                }
            };
            println!(
                "created task `{}` at {} ({} reference programs)",
                generated.spec.task_id,
                out.display(),
                generated.programs.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
