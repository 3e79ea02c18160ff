use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rationale_core::autodiff::Checkpoint;
use rationale_core::data::generate_planted;
use rationale_core::evaluation::{
    evaluate, perturbation_curve, save_curve_csv, CurveConfig, EvalConfig,
};
use rationale_core::experiments::{
    export_report, ingest_dataset, run_one, run_sweep, save_run, split_by_name, stamped_json,
    ExperimentConfig, Phase, SweepResult,
};
use rationale_core::model::RationaleModel;

#[derive(Parser)]
#[command(
    name = "rationale",
    version,
    about = "Train and evaluate select-then-predict rationale models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Joint,
    FullInput,
    Adapted,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Joint => Phase::Joint,
            PhaseArg::FullInput => Phase::FullInput,
            PhaseArg::Adapted => Phase::Adapted,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-rationale dataset.
    GenerateData(Common),
    /// Convert ERASER-style JSONL into a dataset directory.
    Ingest(Common),
    /// Train one model and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
    },
    /// Evaluate a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Perturbation curves for a checkpoint.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every grid point.
    Sweep(Common),
    /// Select best and baseline runs of a sweep and test them.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Sweep result; defaults to `<out>/sweep.json`.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Write report files for a sweep.
    Export {
        #[command(flatten)]
        common: Common,
        /// Sweep result; defaults to `<out>/sweep.json`.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_sweep(path: Option<&PathBuf>, out: &Path) -> Result<SweepResult> {
    let path = path.cloned().unwrap_or_else(|| out.join("sweep.json"));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = load_config(&c)?;
            generate_planted(&cfg.planted)?.save(&c.out)?;
            write(&c.out.join("config.toml"), &cfg.to_toml()?)?;
            Ok(vec![c.out])
        }
        Command::Ingest(c) => {
            let cfg = load_config(&c)?;
            ingest_dataset(&cfg.ingest, cfg.seed)?.save(&c.out)?;
            write(&c.out.join("config.toml"), &cfg.to_toml()?)?;
            Ok(vec![c.out])
        }
        Command::Train { common, phase } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = phase {
                cfg.phase = p.into();
            }
            let data = cfg.load_dataset()?;
            let (outcome, report) = run_one(&cfg, &data)?;
            save_run(&common.out, &cfg, &outcome, &report)?;
            Ok(vec![common.out])
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let data = cfg.load_dataset()?;
            let model = RationaleModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let split = split_by_name(&data, &cfg.eval.split)?;
            let report = evaluate(
                &model,
                split,
                &EvalConfig {
                    probe: cfg.eval.probe,
                    path: cfg.phase.prediction_path(),
                },
            )?;
            let path = common.out.join("metrics.json");
            write(&path, &stamped_json(&report, &cfg.hash()?)?)?;
            Ok(vec![path])
        }
        Command::Perturb { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let data = cfg.load_dataset()?;
            let model = RationaleModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let split = split_by_name(&data, &cfg.eval.split)?;
            let mut paths = Vec::new();
            for &probe in &cfg.eval.curve_probes {
                let rows = perturbation_curve(
                    &model,
                    split,
                    &CurveConfig {
                        modes: cfg.eval.curve_modes.clone(),
                        grid: cfg.eval.curve_grid.clone(),
                        probe,
                        granularity: model.config().granularity,
                        seed: cfg.seed,
                    },
                )?;
                let path = common
                    .out
                    .join(format!("perturbation_{}.csv", probe.name()));
                save_curve_csv(&rows, &path)?;
                paths.push(path);
            }
            Ok(paths)
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c)?;
            let data = cfg.load_dataset()?;
            let result = run_sweep(&cfg, &data, Some(&c.out))?;
            let path = c.out.join("sweep.json");
            write(&path, &(serde_json::to_string_pretty(&result)? + "\n"))?;
            Ok(vec![path])
        }
        Command::Analyze { common, sweep } => {
            let cfg = load_config(&common)?;
            let result = load_sweep(sweep.as_ref(), &common.out)?;
            let analysis = result.analyze(cfg.eval.mcnemar)?;
            let path = common.out.join("analysis.json");
            write(&path, &stamped_json(&analysis, &result.config_hash)?)?;
            Ok(vec![path])
        }
        Command::Export { common, sweep } => {
            let cfg = load_config(&common)?;
            let result = load_sweep(sweep.as_ref(), &common.out)?;
            let analysis = result.analyze(cfg.eval.mcnemar)?;
            Ok(export_report(&result, &analysis, &common.out)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            let body = serde_json::json!({ "error": chain.join(": ") });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
