use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crossia::config::{DeblurKind, RunConfig};
use crossia::train::Preset;
use crossia::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "crossia", version, about = "Cross-quality instance retrieval pipeline")]
struct Cli {
    /// TOML run configuration; preset defaults fill anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// High-quality images per instance used for fine-tuning.
    #[arg(long, global = true, value_parser = ["1", "3", "5"])]
    shots: Option<String>,
    #[arg(long, global = true, value_enum)]
    adversarial: Option<Switch>,
    /// Deblurring applied to robot frames before mapping and cropping.
    #[arg(long, global = true, value_enum)]
    deblur: Option<DeblurArg>,
    /// Overrides `runs_dir` from the configuration.
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic scene, robot trajectory, user images and queries.
    GenWorld,
    /// Build the voxel semantic map and the object-image database.
    Collect,
    /// Fine-tune the encoder on the database.
    Finetune,
    /// Score baseline and fine-tuned encoders on the held-out queries.
    Evaluate,
    /// Few-shot ablation over `evaluation.shots_list`.
    Ablate,
    /// Find the instance shown in an image and print a navigation goal.
    Locate {
        #[arg(long)]
        query: PathBuf,
    },
    /// Write 2D projections of the latent space with scatter plots.
    ExportLatent,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DeblurArg {
    Identity,
    Unsharp,
    External,
}

fn resolve(cli: &Cli) -> crossia::Result<RunConfig> {
    let preset = cli.preset.map(|p| match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    });
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load_with(path, preset)?,
        None => RunConfig::from_toml_str_with("", preset)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.sync_seed();
    }
    if let Some(shots) = &cli.shots {
        cfg.training.shots = shots.parse().expect("validated by clap");
    }
    if let Some(a) = cli.adversarial {
        cfg.training.adversarial.enabled = matches!(a, Switch::On);
    }
    if let Some(d) = cli.deblur {
        cfg.adapters.deblurrer = match d {
            DeblurArg::Identity => DeblurKind::Identity,
            DeblurArg::Unsharp => DeblurKind::Unsharp,
            DeblurArg::External => DeblurKind::External,
        };
    }
    if let Some(dir) = &cli.runs_dir {
        cfg.runs_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 4,
        Error::MissingArtifact(_) => 3,
        _ => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve(&cli).and_then(|cfg| match &cli.command {
        Command::GenWorld => commands::gen_world(&cfg),
        Command::Collect => commands::collect(&cfg),
        Command::Finetune => commands::finetune(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Locate { query } => commands::locate(&cfg, query),
        Command::ExportLatent => commands::export_latent(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
