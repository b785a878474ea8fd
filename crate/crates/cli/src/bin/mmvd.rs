use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmvd_cli::commands::{self, Condition, EvalMode};
use mmvd_cli::config::RunConfig;
use mmvd_cli::CliError;
use mmvd_core::control::TaskKind;

#[derive(Parser)]
#[command(name = "mmvd", about = "Multi-modal video diffusion pipeline")]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set steps=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Source {
    /// Condition on sample INDEX of the evaluation split.
    #[arg(long, value_name = "INDEX", conflicts_with = "condition")]
    sample: Option<usize>,
    /// Condition on a sample file.
    #[arg(long)]
    condition: Option<PathBuf>,
}

impl Source {
    fn resolve(&self, cfg: &RunConfig) -> Condition {
        match (&self.condition, self.sample) {
            (Some(p), _) => Condition::File(p.clone()),
            (None, Some(index)) => Condition::Dataset {
                split: cfg.eval_split.clone(),
                index,
            },
            (None, None) => Condition::None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and eval splits.
    GenData,
    /// Train, writing the log and checkpoint under out_dir.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one sample.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "t2v")]
        task: TaskKind,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        caption: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskKind,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and score the full model and its ablations.
    Ablate,
    /// Restyle a video through its estimated depth.
    V2vStyle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fine-tune for super-resolution and compare against bicubic.
    AdaptSr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => {
            let s = commands::gen_data(&cfg)?;
            println!("{}", s.train_manifest.display());
            println!("{}", s.eval_manifest.display());
        }
        Command::Train { resume } => {
            let o = commands::train(&cfg, resume.as_deref())?;
            println!(
                "step {} loss {:.6} checkpoint {}",
                o.step,
                o.losses.last().copied().unwrap_or(f64::NAN),
                o.checkpoint.display()
            );
        }
        Command::Sample {
            checkpoint,
            task,
            source,
            caption,
            out,
        } => {
            let s = commands::sample_cmd(&cfg, &checkpoint, task, &source.resolve(&cfg), caption.as_deref(), &out)?;
            for f in s.files {
                println!("{}", f.display());
            }
        }
        Command::Eval {
            checkpoint,
            task,
            oracle,
        } => {
            let mode = if oracle { EvalMode::Oracle } else { EvalMode::Model };
            println!("{}", commands::eval_cmd(&cfg, &checkpoint, task, mode)?);
        }
        Command::Ablate => {
            print!("{}", commands::ablation_table(&commands::ablate(&cfg)?));
        }
        Command::V2vStyle {
            checkpoint,
            source,
            caption,
            out_dir,
        } => {
            let s = commands::v2v_style(&cfg, &checkpoint, &source.resolve(&cfg), &caption, &out_dir)?;
            for f in s.files {
                println!("{}", f.display());
            }
        }
        Command::AdaptSr { checkpoint, out } => {
            let a = commands::adapt_sr(&cfg, &checkpoint, &out)?;
            println!(
                "psnr model {:.3} bicubic {:.3} checkpoint {}",
                a.psnr_model,
                a.psnr_bicubic,
                a.checkpoint.display()
            );
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
