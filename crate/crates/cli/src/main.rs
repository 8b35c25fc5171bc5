mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use config::{Overrides, OUT_DIR_ENV};
use storyviz::config::Preset;
use storyviz::data::Split;

#[derive(Parser, Debug)]
#[command(name = "storyviz", version, about = "Story visualization: data, metric models, GAN training, evaluation")]
struct Cli {
    /// TOML run configuration; every key is optional and layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parameter preset.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Master seed; sub-seeds not set in the config file follow it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for all outputs.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    /// Run data-parallel loops sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Captioner,
    Classifier,
    Damsm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the ShapeStories dataset to <out>/data.
    GenData {
        /// Number of stories over all splits.
        #[arg(long)]
        num_stories: Option<usize>,
    },
    /// Train and freeze one metric model.
    Pretrain {
        #[arg(value_enum)]
        which: Which,
        /// Epoch budget (max epochs for the captioner).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Adversarial training; checkpoints and logs go to <out>/train.
    Train {
        /// Stop after this many steps.
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        steps_per_epoch: Option<u64>,
        /// Continue from <out>/train/checkpoint_latest.svz.
        #[arg(long)]
        resume: bool,
    },
    /// Write a metric report for a checkpoint to <out>/eval.
    Eval {
        /// Defaults to <out>/train/checkpoint_latest.svz.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Evaluate a freshly initialised generator instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        /// Evaluate only the first N stories of the split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Generate image grids for the stories in a captions file.
    Generate {
        /// Plain text: one caption per line, stories separated by blank lines.
        #[arg(long)]
        captions: PathBuf,
        /// Defaults to <out>/train/checkpoint_latest.svz.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn overrides(cli: &Cli) -> Overrides {
    let mut keys: Vec<(String, Value)> = Vec::new();
    if cli.sequential {
        keys.push(("exec".into(), "sequential".into()));
        keys.push(("data.exec".into(), "sequential".into()));
    }
    match &cli.cmd {
        Command::GenData { num_stories } => {
            if let Some(n) = num_stories {
                keys.push(("data.num_stories".into(), (*n).into()));
            }
        }
        Command::Pretrain { which, epochs } => {
            if let Some(e) = epochs {
                let key = match which {
                    Which::Captioner => "pretrain.captioner.max_epochs",
                    Which::Classifier => "pretrain.classifier.epochs",
                    Which::Damsm => "pretrain.damsm.epochs",
                };
                keys.push((key.into(), (*e).into()));
            }
        }
        Command::Train {
            max_steps,
            epochs,
            steps_per_epoch,
            ..
        } => {
            if let Some(m) = max_steps {
                keys.push(("train.max_steps".into(), (*m).into()));
            }
            if let Some(e) = epochs {
                keys.push(("train.epochs".into(), (*e).into()));
            }
            if let Some(s) = steps_per_epoch {
                keys.push(("train.steps_per_epoch".into(), (*s).into()));
            }
        }
        Command::Eval { split: Some(s), .. } => {
            keys.push(("eval.split".into(), serde_json::to_value(Split::from(*s)).unwrap_or_default()));
        }
        _ => {}
    }
    Overrides {
        preset: cli.preset.map(|p| match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }),
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
        keys,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config::load(cli.config.as_deref(), &overrides(&cli))?;
    match cli.cmd {
        Command::GenData { .. } => commands::gen_data(&cfg),
        Command::Pretrain { which, .. } => match which {
            Which::Captioner => commands::pretrain_captioner(cfg),
            Which::Classifier => commands::pretrain_classifier(cfg),
            Which::Damsm => commands::pretrain_damsm(cfg),
        },
        Command::Train { resume, .. } => commands::train(cfg, resume),
        Command::Eval {
            checkpoint,
            untrained,
            limit,
            ..
        } => commands::eval(cfg, checkpoint, untrained, limit),
        Command::Generate { captions, checkpoint } => commands::generate(cfg, &captions, checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
