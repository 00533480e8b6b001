use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use roomdiff_cli::config::ExperimentConfig;
use roomdiff_cli::error::CliResult;
use roomdiff_cli::pipeline::{self, DiffusionMode, Run, Variant};

#[derive(Parser)]
#[command(name = "roomdiff", version, about = "Curriculum diffusion with contrastive feedback on synthetic interior scenes")]
struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Start from the seconds-scale smoke profile instead of the defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    smoke: bool,
    /// Continue an interrupted diffusion training run from its saved state.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as JSON.
    Config,
    /// Render the design and general corpora with captions.
    Corpus,
    TrainCodec,
    /// Two-stage contrastive encoder training plus the retrieval report.
    TrainEncoder,
    TrainDiffusion {
        /// Train at high resolution only instead of the curriculum.
        #[arg(long)]
        direct: bool,
    },
    Rlcf,
    Generate {
        /// Prompt text; test-split captions are used when omitted.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    Eval,
    /// Full pipeline plus one run per removed component.
    Ablate {
        /// Comma-separated subset of no_cap, no_cl, no_rlcf.
        #[arg(long, value_delimiter = ',', default_value = "no_cap,no_cl,no_rlcf")]
        variants: Vec<String>,
    },
    /// Loss, alpha and reward curves as SVG and PNG.
    Plot,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Config => "config",
        Command::Corpus => "corpus",
        Command::TrainCodec => "train-codec",
        Command::TrainEncoder => "train-encoder",
        Command::TrainDiffusion { .. } => "train-diffusion",
        Command::Rlcf => "rlcf",
        Command::Generate { .. } => "generate",
        Command::Eval => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Plot => "plot",
    }
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if cli.smoke => ExperimentConfig::smoke(),
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    match cli.command {
        Command::Config => Ok(serde_json::to_value(&config).expect("config serializes")),
        Command::Ablate { variants } => {
            let variants = variants
                .iter()
                .filter(|v| !v.trim().is_empty())
                .map(|v| Variant::parse(v))
                .collect::<CliResult<Vec<_>>>()?;
            let rows = pipeline::cmd_ablate(&config, &cli.out, &variants)?;
            Ok(serde_json::to_value(rows).expect("rows serialize"))
        }
        cmd => {
            let mut run = Run::open(config, &cli.out, cli.resume)?;
            match cmd {
                Command::Corpus => pipeline::cmd_corpus(&mut run),
                Command::TrainCodec => pipeline::cmd_train_codec(&mut run),
                Command::TrainEncoder => pipeline::cmd_train_encoder(&mut run),
                Command::TrainDiffusion { direct } => {
                    let mode = if direct { DiffusionMode::DirectHighRes } else { DiffusionMode::Curriculum };
                    pipeline::cmd_train_diffusion(&mut run, mode)
                }
                Command::Rlcf => pipeline::cmd_rlcf(&mut run),
                Command::Generate { prompt, n } => pipeline::cmd_generate(&mut run, prompt.as_deref(), n),
                Command::Eval => pipeline::cmd_eval(&mut run).map(|r| serde_json::to_value(r).expect("reports serialize")),
                Command::Plot => pipeline::cmd_plot(&mut run).map(|f| serde_json::json!({ "files": f })),
                Command::Config | Command::Ablate { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(mut e) => {
            if e.phase.is_empty() {
                e.phase = name.into();
            }
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
