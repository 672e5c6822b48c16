use std::path::PathBuf;
use std::process::ExitCode;

use asac_core::pipeline::{
    cmd_analyze, cmd_evaluate, cmd_finetune, cmd_generate, cmd_sweep, cmd_train_base, AnalyzeMode,
    ExperimentConfig, SweepAxis, BASE_CHECKPOINT,
};
use asac_core::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "asac", version, about = "Adversarial counterfactual fine-tuning pipeline")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test split.
    Generate,
    /// Train the target head and the protected probe.
    TrainBase,
    /// Curriculum fine-tuning from the base checkpoint.
    Finetune,
    /// Fine-tune once per value of one axis.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated; eps sets join magnitudes with '+', e.g. 0.001+0.01.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Robustness curves or Integrated Gradients on test samples.
    Analyze {
        #[arg(long)]
        mode: String,
        /// Defaults to the base checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fairness report for a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let checkpoint_or_base =
        |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| cfg.out_dir.join(BASE_CHECKPOINT));
    match &cli.command {
        Command::Generate => {
            let m = cmd_generate(&cfg)?;
            println!(
                "wrote {} ({} samples) and {} ({} samples) to {}, corr(y, a) = {:.4}",
                m.train.file,
                m.train.samples,
                m.test.file,
                m.test.samples,
                cfg.out_dir.display(),
                m.label_correlation
            );
        }
        Command::TrainBase => {
            let r = cmd_train_base(&cfg)?;
            println!(
                "base: acc {:.4} ddp {} deo {} deop {} protected acc {:.4}",
                r.target.acc,
                fmt_metric(r.target.ddp),
                fmt_metric(r.target.deo),
                fmt_metric(r.target.deop),
                r.protected_accuracy
            );
        }
        Command::Finetune => {
            let r = cmd_finetune(&cfg)?;
            println!(
                "base:      acc {:.4} ddp {} deo {} deop {}",
                r.base.acc,
                fmt_metric(r.base.ddp),
                fmt_metric(r.base.deo),
                fmt_metric(r.base.deop)
            );
            println!(
                "finetuned: acc {:.4} ddp {} deo {} deop {}",
                r.target.acc,
                fmt_metric(r.target.ddp),
                fmt_metric(r.target.deo),
                fmt_metric(r.target.deop)
            );
        }
        Command::Sweep { axis, values } => {
            let axis: SweepAxis = axis.parse()?;
            let values = if values.is_empty() {
                axis.default_values()
            } else {
                values.clone()
            };
            for row in cmd_sweep(&cfg, axis, &values)? {
                println!(
                    "{}={}: acc {:.4} ddp {} deo {} deop {}",
                    axis.name(),
                    row.value,
                    row.report.acc,
                    fmt_metric(row.report.ddp),
                    fmt_metric(row.report.deo),
                    fmt_metric(row.report.deop)
                );
            }
        }
        Command::Analyze { mode, checkpoint } => {
            let mode: AnalyzeMode = mode.parse()?;
            let path = cmd_analyze(&cfg, &checkpoint_or_base(checkpoint), mode)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate { checkpoint } => {
            let r = cmd_evaluate(&cfg, &checkpoint_or_base(checkpoint))?;
            println!(
                "{}: acc {:.4} ddp {} deo {} deop {} protected acc {:.4}",
                r.checkpoint,
                r.target.acc,
                fmt_metric(r.target.ddp),
                fmt_metric(r.target.deo),
                fmt_metric(r.target.deop),
                r.protected_accuracy
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
