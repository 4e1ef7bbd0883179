use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dampedlab::experiment::{self, ExperimentKind};

#[derive(Parser)]
#[command(name = "dampedlab", version, about = "Damped quantum maps and damped waves: config-driven experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config
    #[arg(long)]
    config: PathBuf,
    /// output directory (overrides `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// random seed (overrides `seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    Classical(RunArgs),
    Pressure(RunArgs),
    QmapSpectrum(RunArgs),
    FractalWeyl(RunArgs),
    DispersionPaths(RunArgs),
    DispersionProjector(RunArgs),
    Dwe(RunArgs),
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let Some(seed) = seed else { return Ok(text) };
    // the seed override has to be visible to validation
    let mut v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(obj) = v.as_object_mut() {
        obj.insert("seed".into(), seed.into());
    }
    Ok(v.to_string())
}

fn run(kind: ExperimentKind, args: RunArgs) -> anyhow::Result<bool> {
    let text = load(&args.config, args.seed)?;
    let mut cfg = experiment::parse_config(&text)?;
    anyhow::ensure!(
        cfg.experiment == kind,
        "config describes experiment {}, not {}",
        cfg.experiment.name(),
        kind.name()
    );
    if let Some(out) = args.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    let manifest = experiment::run(&cfg)?;
    for s in &manifest.stages {
        eprintln!("{:<20} {:>9.3} s", s.stage, s.wall_s);
    }
    for a in &manifest.assertions {
        println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    println!("wrote {} files to {}", manifest.outputs.len() + 1, cfg.output_dir);
    Ok(manifest.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Classical(a) => run(ExperimentKind::Classical, a),
        Command::Pressure(a) => run(ExperimentKind::Pressure, a),
        Command::QmapSpectrum(a) => run(ExperimentKind::QmapSpectrum, a),
        Command::FractalWeyl(a) => run(ExperimentKind::FractalWeyl, a),
        Command::DispersionPaths(a) => run(ExperimentKind::DispersionPaths, a),
        Command::DispersionProjector(a) => run(ExperimentKind::DispersionProjector, a),
        Command::Dwe(a) => run(ExperimentKind::Dwe, a),
        Command::Validate { config } => std::fs::read_to_string(&config)
            .with_context(|| format!("reading {}", config.display()))
            .and_then(|t| Ok(experiment::parse_config(&t)?))
            .map(|c| {
                println!("ok: {}", c.experiment.name());
                true
            }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
