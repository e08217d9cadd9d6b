use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advood::pipeline::{self, Layout, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "advood", version, about = "Post-hoc OOD detectors under white-box evasion attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for batch-parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    GenData,
    Train,
    Attack,
    FitDetectors,
    Score,
    Evaluate,
    Gradcam,
    Report,
    /// Every stage through the report.
    Run {
        /// Resume from this stage, reusing earlier outputs.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Print the default config as JSON.
    DefaultConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> advood::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| advood::Error::Config { field: "threads".into(), msg: e.to_string() })?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let stage = match cli.command {
        Command::DefaultConfig => {
            println!("{}", cfg.to_json());
            return Ok(());
        }
        Command::Run { stage } => {
            let from = stage.map(|s| s.parse::<Stage>()).transpose()?;
            let layout = layout(&cli.out, &cfg)?;
            let report = pipeline::run(&cfg, &layout, from)?;
            print!("{}", pipeline::render_markdown(&report));
            return Ok(());
        }
        Command::GenData => Stage::GenData,
        Command::Train => Stage::Train,
        Command::Attack => Stage::Attack,
        Command::FitDetectors => Stage::FitDetectors,
        Command::Score => Stage::Score,
        Command::Evaluate => Stage::Evaluate,
        Command::Gradcam => Stage::Gradcam,
        Command::Report => Stage::Report,
    };
    cfg.validate()?;
    pipeline::run_stage(stage, &cfg, &layout(&cli.out, &cfg)?)?;
    eprintln!("{} done", stage.name());
    Ok(())
}

fn layout(out: &Option<PathBuf>, cfg: &RunConfig) -> advood::Result<Layout> {
    out.clone().or_else(|| cfg.out_dir.clone()).map(Layout::new).ok_or_else(|| advood::Error::Config {
        field: "out".into(),
        msg: "no output directory: pass --out or set `out_dir` in the config".into(),
    })
}
