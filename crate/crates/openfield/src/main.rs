use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use openfield::commands::{self, QueryTarget};
use openfield::config::{EvalMode, PipelineConfig};
use openfield::{CliError, Result};

#[derive(Parser)]
#[command(name = "openfield", version, about = "Open-vocabulary feature fields on synthetic scenes")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Point-feature extraction for `eval`.
    #[arg(long, global = true)]
    mode: Option<EvalMode>,
    /// Omit wall-clock data so reruns write byte-identical files.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render frames, stub features and the labeled point cloud.
    Generate,
    /// Fit the feature field to the generated frames.
    Train,
    /// Fuse frame features onto the point cloud with per-point uncertainty.
    Fuse,
    /// Propose, realize and train on uncertainty-driven novel views.
    Propose,
    /// Segment the point cloud and score it.
    Eval,
    /// Render relevancy heatmaps for one query.
    Query {
        /// Query label, e.g. `class_3`.
        label: String,
        /// JSON embedding file (a vector, or labels + embeddings).
        #[arg(long)]
        embedding: Option<PathBuf>,
        /// Camera indices; defaults to the config's `eval.query_cameras`.
        #[arg(long, value_delimiter = ',')]
        camera: Option<Vec<usize>>,
    },
    /// Run the five-variant ablation on the reference scene.
    Ablate,
}

fn load(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if matches!(cli.command, Command::Ablate) => PipelineConfig::default(),
        None => return Err(CliError::Invalid("--config is required for this command".into())),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(m) = cli.mode {
        cfg.eval.mode = m;
    }
    cfg.deterministic |= cli.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Vec<String>> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Generate => commands::cmd_generate(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Fuse => commands::cmd_fuse(&cfg),
        Command::Propose => commands::cmd_propose(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Query {
            label,
            embedding,
            camera,
        } => {
            let target = match embedding {
                Some(path) => QueryTarget::EmbeddingFile {
                    label: label.clone(),
                    path: path.clone(),
                },
                None => QueryTarget::Label(label.clone()),
            };
            commands::cmd_query(&cfg, &target, camera.as_deref())
        }
        Command::Ablate => commands::cmd_ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
