use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hdformer::config::ExperimentConfig;
use hdformer::{pipeline, Result};

/// Square-token transformer mixture for long physiological signals.
#[derive(Debug, Parser)]
#[command(name = "hdformer", version)]
struct Cli {
    /// Flat TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (highest precedence).
    #[arg(long, global = true, env = hdformer::OUT_DIR_ENV)]
    out_dir: Option<String>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        n_subjects: Option<usize>,
    },
    /// Resample, denoise and normalise every manifest record.
    Preprocess,
    /// Token and attention-pair counts for each attention variant.
    TokenizeStats,
    /// Train, checkpoint the best-validation model and evaluate it.
    Train {
        /// `moe`, `single:T` or a list such as `T/2,T,2T`.
        #[arg(long)]
        experts: Option<String>,
    },
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// ROC curve and AUC of a scores file.
    Roc {
        #[arg(long)]
        scores: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(dir) = &cli.out_dir {
        overrides.push(format!("out_dir={}", toml_string(dir)));
    }
    match &cli.command {
        Command::Synth { n_subjects: Some(n) } => overrides.push(format!("n_subjects={n}")),
        Command::Train { experts: Some(e) } => overrides.push(format!("experts={}", toml_string(e))),
        _ => {}
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::Synth { .. } => {
            let m = pipeline::synthesize(&cfg)?;
            println!("wrote {} records to {}", m.entries.len(), cfg.manifest.display());
        }
        Command::Preprocess => {
            let dir = pipeline::preprocess_cmd(&cfg)?;
            println!("wrote preprocessed records to {}", dir.display());
        }
        Command::TokenizeStats => print!("{}", pipeline::tokenize_stats(&cfg)?),
        Command::Train { .. } => {
            let out = pipeline::train_cmd(&cfg)?;
            for e in &out.report.epochs {
                println!("epoch {:>3}  train_loss {:.6}  val_loss {:.6}", e.epoch, e.train_loss, e.val_loss);
            }
            println!("best epoch {}; checkpoint {}", out.report.best_epoch, out.checkpoint.display());
            print_summary(&out.eval);
        }
        Command::Eval { checkpoint } => print_summary(&pipeline::eval_cmd(&cfg, &checkpoint)?),
        Command::Roc { scores } => {
            let (auc, path) = pipeline::roc_cmd(&cfg, &scores)?;
            println!("auc {auc}; wrote {}", path.display());
        }
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn print_summary(r: &hdformer_core::metrics::EvalReport) {
    for (level, m) in [("record", &r.record), ("patient", &r.patient)] {
        let auc = m.auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "{level:>7}: sensitivity {:.4}  accuracy {:.4}  specificity {:.4}  auc {auc}",
            m.sensitivity, m.accuracy, m.specificity
        );
    }
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
