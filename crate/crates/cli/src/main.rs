//! `bag`: train, evaluate and inspect blur-attention deblurring models.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! abort.

mod commands;
mod config;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bag_core::BagError;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_assignment, Layered, Settings};

#[derive(Parser, Debug)]
#[command(name = "bag", version, about = "Blur-attention GAN for blind motion deblurring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.lr0=2e-4`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory for every artifact of the run.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,

    /// Seed for training and synthesis (`train.seed`, `synth.seed`).
    #[arg(long)]
    seed: Option<u64>,

    /// Force bit-reproducible execution (`train.deterministic = true`).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a generator and critic.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a dataset split (PSNR, SSIM, runtime).
    Eval(commands::EvalArgs),
    /// Restore single images or a directory of images.
    Infer(commands::InferArgs),
    /// Render attention maps or tile training snapshots into a grid.
    Visualize(commands::VisualizeArgs),
    /// Train and score several ablation variants under one configuration.
    Ablate(commands::AblateArgs),
    /// Make blurred/sharp pairs from sharp images or procedural scenes.
    Synthesize(commands::SynthesizeArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Infer(_) => "infer",
            Command::Visualize(_) => "visualize",
            Command::Ablate(_) => "ablate",
            Command::Synthesize(_) => "synthesize",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Infer(a) => &a.common,
            Command::Visualize(a) => &a.common,
            Command::Ablate(a) => &a.common,
            Command::Synthesize(a) => &a.common,
        }
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve(command: &Command) -> Result<Settings> {
    let common = command.common();
    let mut layers = Layered::new();
    if let Some(path) = &common.config {
        layers.load_file(path)?;
    }
    for text in &common.overrides {
        let (k, v) = parse_assignment(text)?;
        layers.set(&k, v)?;
    }
    if let Some(seed) = common.seed {
        layers.set("train.seed", seed.into())?;
        layers.set("synth.seed", seed.into())?;
    }
    if common.deterministic {
        layers.set("train.deterministic", true.into())?;
    }
    match command {
        Command::Train(a) => a.apply(&mut layers)?,
        Command::Eval(a) => a.apply(&mut layers)?,
        Command::Ablate(a) => a.apply(&mut layers)?,
        _ => {}
    }
    Ok(layers.settings()?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let bag = err.chain().find_map(|e| e.downcast_ref::<BagError>());
    match bag {
        Some(BagError::NumericalAbort(_) | BagError::NonFinite(_)) => 3,
        Some(
            BagError::Data(_)
            | BagError::MissingCounterpart { .. }
            | BagError::Undersized(_)
            | BagError::Io { .. }
            | BagError::Image { .. }
            | BagError::CorruptCheckpoint(_),
        ) => 2,
        _ => 1,
    }
}

fn run(command: &Command) -> Result<()> {
    let settings = resolve(command)?;
    let out = &command.common().out;
    std::fs::create_dir_all(out).map_err(|e| BagError::Data(format!("cannot create {}: {e}", out.display())))?;
    provenance::write_config(out, &settings)?;
    let mut record = provenance::RunRecord::start(command.name(), &settings);
    record.write(out)?;
    let result = match command {
        Command::Train(a) => commands::train(a, &settings, &mut record),
        Command::Eval(a) => commands::eval(a, &settings, &mut record),
        Command::Infer(a) => commands::infer(a, &settings, &mut record),
        Command::Visualize(a) => commands::visualize(a, &settings, &mut record),
        Command::Ablate(a) => commands::ablate(a, &settings, &mut record),
        Command::Synthesize(a) => commands::synthesize(a, &settings, &mut record),
    };
    record.finish(result.as_ref().err().map(|e| (format!("{e:#}"), exit_code(e))));
    record.write(out)?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
