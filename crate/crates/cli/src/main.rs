use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use d3d_cli::commands::{cmd_ablation, cmd_eval, cmd_flow_viz, cmd_generate, cmd_probe_sweep, cmd_train};
use d3d_cli::{CliError, RunConfig, Stream};

#[derive(Parser)]
#[command(name = "d3d", version, about = "Distilled 3D networks on synthetic motion data")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// `key = value` config file; `--set` overrides it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render clips, compute TV-L1 flow and write the dataset.
    Generate,
    /// Train the temporal stream on TV-L1 flow.
    TrainTeacher,
    /// Train the RGB stream with cross-entropy.
    TrainBaseline,
    /// Train the RGB stream distilled from the teacher.
    TrainD3d,
    /// Flow probes at every layer of the baseline and D3D backbones.
    ProbeSweep,
    /// Every ablation row over the configured seeds.
    Ablation,
    /// Held-out accuracy of a checkpoint, or of a fresh network.
    Eval,
    /// RGB, TV-L1 and probe flow panels as PNG.
    FlowViz,
}

fn run(args: &Args) -> Result<(), CliError> {
    let out = args.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    if let Some(c) = &args.config {
        if !c.exists() {
            return Err(CliError::Missing(c.clone()));
        }
    }
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides, args.seed)?;
    match args.command {
        Command::Generate => cmd_generate(&cfg, &out),
        Command::TrainTeacher => cmd_train(Stream::Teacher, &cfg, &out),
        Command::TrainBaseline => cmd_train(Stream::Baseline, &cfg, &out),
        Command::TrainD3d => cmd_train(Stream::D3D, &cfg, &out),
        Command::ProbeSweep => cmd_probe_sweep(&cfg, &out),
        Command::Ablation => cmd_ablation(&cfg, &out),
        Command::Eval => cmd_eval(&cfg, &out),
        Command::FlowViz => cmd_flow_viz(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    env_logger::Builder::new()
        .filter_level(if args.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .format_timestamp(None)
        .init();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
