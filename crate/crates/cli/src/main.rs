use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fishbev::pipeline::{self, InspectTarget, RunConfig};
use fishbev::Error;

/// Surround-view fisheye BEV perception: dataset generation, training,
/// evaluation and throughput measurement.
#[derive(Debug, Parser)]
#[command(name = "fishbev", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key.path=value`, applied before validation; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Report directory, overriding `paths.reports`.
    #[arg(long, env = "FISHBEV_REPORT_DIR", global = true)]
    report_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset; the manifest is written last.
    Generate,
    /// Train or resume from the latest checkpoint.
    Train,
    /// Evaluate a checkpoint; exits with 4 when a threshold is missed.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time forward passes per stage.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the resolved config, the schema, the dataset, a checkpoint or
    /// the parameter list as JSON.
    Inspect {
        #[arg(default_value = "config")]
        target: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        Error::Acceptance(_) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = RunConfig::load(path, &overrides)?;
    if let Some(dir) = &cli.report_dir {
        cfg.paths.reports = dir.clone();
    }
    Ok(cfg)
}

fn print(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => {
            let m = pipeline::cmd_generate(&cfg)?;
            print(&serde_json::json!({ "dataset": cfg.paths.dataset, "counts": m.counts, "hash": m.hash() }));
        }
        Command::Train => print(&pipeline::cmd_train(&cfg)?),
        Command::Eval { checkpoint } => {
            let out = pipeline::cmd_eval(&cfg, checkpoint.as_deref())?;
            print(&out);
            out.check()?;
        }
        Command::Bench { checkpoint } => print(&pipeline::cmd_bench(&cfg, checkpoint.as_deref())?),
        Command::Inspect { target, checkpoint } => {
            let target: InspectTarget = target.parse()?;
            print(&pipeline::cmd_inspect(&cfg, target, checkpoint.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
