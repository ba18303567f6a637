use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use htmnet_cli::commands::{self, EvalArgs, InferArgs};
use htmnet_cli::{RunConfig, UsageError};
use htmnet_core::metrics::MetricScope;

#[derive(Parser)]
#[command(name = "htmnet", version, about = "Transparent-object depth completion")]
struct Cli {
    /// Worker threads; falls back to HTM_THREADS, then all cores.
    #[arg(long, global = true, env = "HTM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Read the dataset back and check every scene.
        #[arg(long)]
        verify: bool,
    },
    /// Train from scratch and write checkpoints plus a CSV log.
    Train {
        /// Defaults to the full-size configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to run.cfg next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scope: Option<MetricScope>,
        /// Also write the result row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Complete one depth map.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// P5 image of the absolute error; defaults to <out>.err.pgm when --gt is given.
        #[arg(long)]
        error_map: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every block, always in f64.
    Gradcheck {
        /// Defaults to the tiny configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to these blocks (repeatable).
        #[arg(long)]
        block: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn config_or(path: Option<&PathBuf>, fallback: RunConfig) -> Result<RunConfig> {
    match path {
        Some(p) => {
            if !p.is_file() {
                return Err(UsageError(format!("config {} not found", p.display())).into());
            }
            RunConfig::load(p).with_context(|| format!("config {}", p.display()))
        }
        None => Ok(fallback),
    }
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Gen {
            seed,
            count,
            size,
            out,
            verify,
        } => {
            let samples = commands::gen(seed, count as usize, size, &out, verify)?;
            let note = if verify { ", verified" } else { "" };
            println!("wrote {} scenes to {}{note}", samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            steps,
        } => {
            let mut cfg = config_or(config.as_ref(), RunConfig::default())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            commands::run_train(&cfg, data.as_deref(), &out, false)?;
        }
        Command::Eval {
            ckpt,
            data,
            config,
            scope,
            csv,
        } => {
            commands::run_eval(&EvalArgs {
                ckpt: &ckpt,
                data: &data,
                config: config.as_deref(),
                scope,
                csv: csv.as_deref(),
            })?;
        }
        Command::Infer {
            ckpt,
            config,
            rgb,
            depth,
            out,
            gt,
            mask,
            error_map,
        } => {
            let error_map = error_map.or_else(|| gt.as_ref().map(|_| out.with_extension("err.pgm")));
            commands::run_infer(&InferArgs {
                ckpt: &ckpt,
                config: config.as_deref(),
                rgb: &rgb,
                depth: &depth,
                out: &out,
                gt: gt.as_deref(),
                mask: mask.as_deref(),
                error_map,
            })?;
        }
        Command::Gradcheck {
            config,
            block,
            seed,
            inject_fault,
        } => {
            let cfg = config_or(config.as_ref(), RunConfig::tiny())?;
            let checks = commands::run_gradcheck(&cfg, &block, seed, inject_fault)?;
            for c in &checks {
                println!("{}", commands::format_check(c));
            }
            let failed = commands::failed_blocks(&checks);
            if !failed.is_empty() {
                eprintln!("gradient check failed: {}", failed.join(", "));
                return Ok(false);
            }
            println!("all {} blocks within tolerance", checks.len());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
