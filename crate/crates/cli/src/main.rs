use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use demo_cli::{
    cmd_evaluate, cmd_predict, cmd_simulate, cmd_train, cmd_verify, parse_kind, resolve_config,
    threads_from_env, CliError, Overrides,
};
use demo_core::data::Mode;
use demo_core::verify::SuiteOptions;

#[derive(Parser, Debug)]
#[command(name = "demo", version, about = "Dynamics-aware multimodal trajectory prediction")]
struct Cli {
    /// Config file (`key = value` lines); mode defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scene file or directory (.csv trajectory tables, .json scene arrays).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Largest K for minADE/minFDE.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; without --data, on generated scenes.
    Train,
    /// Predict every scene in --data with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a predictions file against the futures in --data.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Directory for per-scene SVG overlays.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Generate synthetic scenes.
    Simulate {
        /// Scenario name or `mixed`.
        #[arg(long, default_value = "mixed")]
        kind: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Run the invariant suite and print a pass/fail matrix.
    Verify,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn require(opt: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    opt.ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = threads_from_env(std::env::var("DEMO_THREADS").ok().as_deref())? {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ov = Overrides {
        mode: cli.mode,
        seed: cli.seed,
        epochs: cli.epochs,
        k: cli.k,
    };
    let cfg = resolve_config(cli.config.as_deref(), &ov)?;
    match cli.command {
        Command::Train => {
            let out = require(cli.out, "--out")?;
            let m = cmd_train(&cfg, cli.data.as_deref(), &out)?;
            let metrics = std::fs::read_to_string(&m.metrics).unwrap_or_default();
            println!("{metrics}");
            println!("manifest: {}", out.join(demo_cli::MANIFEST_FILE).display());
        }
        Command::Predict { checkpoint } => {
            let data = require(cli.data, "--data")?;
            let out = require(cli.out, "--out")?;
            let preds = cmd_predict(&cfg, &checkpoint, &data, &out)?;
            println!("{} predictions written to {}", preds.len(), out.display());
        }
        Command::Evaluate { predictions, svg } => {
            let data = require(cli.data, "--data")?;
            let (_, table) = cmd_evaluate(&cfg, &predictions, &data, cli.out.as_deref(), svg.as_deref())?;
            print!("{table}");
        }
        Command::Simulate { kind, count } => {
            let out = require(cli.out, "--out")?;
            let kind = parse_kind(&kind)?;
            let files = cmd_simulate(&cfg, kind, count, cfg.seed, &out)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Verify => {
            let (_, matrix, status) = cmd_verify(SuiteOptions::default());
            print!("{matrix}");
            status?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
