use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ddk_bench::summary::{format_table, summarize_dir, write_run};
use ddk_bench::{run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ddk", version, about = "Bayesian data-driven estimation benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Override the number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fill the wall_ms column of trials.csv (makes it run-dependent).
    #[arg(long)]
    record_timing: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Recompute summary.csv and boxplot.svg from trials.csv.
    Summarize {
        #[arg(long = "in")]
        dir: PathBuf,
    },
    /// Run a built-in preset: t1 (smoothing), t2 (prediction) or t3 (control).
    Demo {
        preset: String,
        #[command(flatten)]
        args: RunArgs,
    },
}

fn execute(mut cfg: ExperimentConfig, args: RunArgs, default_out: PathBuf) -> Result<()> {
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args.out.or_else(|| cfg.out_dir.clone()).unwrap_or(default_out);
    cfg.validate()?;
    let start = Instant::now();
    let records = run_experiment(&cfg, args.workers)?;
    let rows = write_run(&out, &cfg, &records, args.record_timing)?;
    print!("{}", format_table(&rows));
    eprintln!("{} trials in {:.1} s, results in {}", cfg.trials, start.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Run { config, args } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", config.display()))?;
            execute(cfg, args, PathBuf::from("ddk-results"))
        }
        Cmd::Summarize { dir } => {
            let rows = summarize_dir(&dir)?;
            print!("{}", format_table(&rows));
            Ok(())
        }
        Cmd::Demo { preset, args } => {
            let cfg = ExperimentConfig::preset(&preset)?;
            execute(cfg, args, PathBuf::from(format!("ddk-demo-{preset}")))
        }
    }
}
