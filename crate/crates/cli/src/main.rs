use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mixlora::bench::Phase;
use mixlora::moe::ForwardMode;
use mixlora::run::config::RunConfig;
use mixlora::run::data::TaskKind;
use mixlora::run::{self, AnyCheckpoint, BenchOptions, SweepAxis};

/// Mixture-of-LoRA-experts training, evaluation and benchmarks.
#[derive(Parser)]
#[command(name = "mixlora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters and write a checkpoint plus a JSONL metrics stream.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<ForwardMode>,
        /// One adapter set on the task mixture instead of one set per task.
        #[arg(long)]
        multitask: bool,
        /// Metrics path; defaults to the checkpoint path with `.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Held-out accuracy and routing statistics for one task.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Latency, FLOP and memory comparison of the forward modes.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "vanilla,optimized")]
        modes: Vec<ForwardMode>,
        #[arg(long, default_value_t = 1)]
        models: usize,
        #[arg(long, default_value = "forward")]
        phase: Phase,
        #[arg(long, default_value_t = run::BENCH_TOKENS)]
        tokens: usize,
        #[arg(long, default_value_t = run::BENCH_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = run::BENCH_ITERS)]
        iters: usize,
    },
    /// Train one model per value of a hyperparameter axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        /// Defaults to the axis's standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        parallel: bool,
    },
    /// Per-layer, per-expert dispatch fractions and mean router probabilities.
    InspectRouting {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    AnyCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            mode,
            multitask,
            metrics,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cfg.multitask |= multitask;
            let metrics_path = metrics.unwrap_or_else(|| out.with_extension("metrics.jsonl"));
            let file = File::create(&metrics_path)
                .with_context(|| format!("creating metrics file {}", metrics_path.display()))?;
            let mut sink = BufWriter::new(file);
            let outcome = run::train(&cfg, &mut sink)?;
            outcome
                .checkpoint
                .save(&out)
                .with_context(|| format!("writing checkpoint {}", out.display()))?;
            print_json(&serde_json::json!({
                "checkpoint": out,
                "metrics": metrics_path,
                "sets": outcome.summaries,
            }))
        }
        Command::Eval {
            ckpt,
            task,
            samples,
            seed,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let run_cfg = &ck.meta().run;
            let samples = samples.unwrap_or(run_cfg.eval_samples);
            let seed = seed.unwrap_or_else(|| run::eval_seed(run_cfg));
            print_json(&ck.evaluate(task, samples, seed)?)
        }
        Command::Bench {
            config,
            modes,
            models,
            phase,
            tokens,
            warmup,
            iters,
        } => {
            if modes.is_empty() {
                bail!(mixlora::Error::Config("--modes is empty".into()));
            }
            let cfg = load_config(&config)?;
            let opts = BenchOptions {
                modes,
                models,
                phase,
                tokens,
                warmup,
                iters,
            };
            print_json(&run::bench_report(&cfg.model, &opts)?)
        }
        Command::Sweep {
            config,
            axis,
            values,
            parallel,
        } => {
            let cfg = load_config(&config)?;
            let values = values.unwrap_or_else(|| axis.default_values());
            print_json(&run::sweep(&cfg, axis, &values, parallel)?)
        }
        Command::InspectRouting { ckpt, task, samples } => {
            let ck = load_checkpoint(&ckpt)?;
            let run_cfg = &ck.meta().run;
            let report = ck.evaluate(task, samples.unwrap_or(run_cfg.eval_samples), run::eval_seed(run_cfg))?;
            print_json(&serde_json::json!({
                "task": report.task,
                "load_std": report.load_std,
                "routing": report.routing,
            }))
        }
    }
}

/// 2 for configuration and usage problems, 3 for numeric failure, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    use mixlora::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Numeric { .. }) => 3,
        Some(E::Config(_) | E::SequenceTooLong { .. } | E::Json(_) | E::Contract(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
