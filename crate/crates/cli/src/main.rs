use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ptum::finetune::{Regime, Task};
use ptum::runner::{
    build_vocab, gen_data, run_evaluate, run_finetune, run_pretrain, run_sweep, EvalSplit, ExperimentConfig,
    FinetuneRequest, SweepAxis, RESULTS_FILE, VOCAB_FILE,
};
use ptum::Error;

/// Pre-train user models on behavior logs and evaluate them downstream.
#[derive(Parser)]
#[command(name = "ptum", version = ptum::runner::BUILD_ID)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the JSONL datasets and vocab.txt.
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic world.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides world.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the vocabulary from the pre-training corpus.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        /// Defaults to <data>/vocab.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train a user model; writes pretrained.ckpt and loss.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Overrides pretrain.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train downstream models. Omitted selectors expand to the config's lists.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint, required by the frozen and finetune regimes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse::<Task>)]
        task: Option<Task>,
        #[arg(long, value_parser = parse::<Regime>)]
        regime: Option<Regime>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fine-tuned checkpoint without training.
    Evaluate {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse::<Task>)]
        task: Option<Task>,
        #[arg(long, default_value = "test", value_parser = parse::<EvalSplit>)]
        split: EvalSplit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep lambda or K: pre-train per value, then fine-tune.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse::<SweepAxis>)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn config(path: Option<&Path>) -> ptum::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> ptum::Result<()> {
    match cli.cmd {
        Cmd::GenData { config: c, seed, out } => {
            let mut cfg = config(c.as_deref())?;
            if let Some(s) = seed {
                cfg.world.seed = s;
            }
            let meta = gen_data(&cfg, &out)?;
            println!(
                "wrote {} pretrain users, {} labeled users, {} impressions to {}",
                meta.counts.pretrain_users,
                meta.counts.demo_users,
                meta.counts.ctr_impressions,
                out.display()
            );
        }
        Cmd::BuildVocab { common, out } => {
            let cfg = config(common.config.as_deref())?;
            let out = out.unwrap_or_else(|| common.data.join(VOCAB_FILE));
            let vocab = build_vocab(&cfg, &common.data, &out)?;
            println!("wrote {} ids to {}", vocab.len(), out.display());
        }
        Cmd::Pretrain { common, seed, out } => {
            let mut cfg = config(common.config.as_deref())?;
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            let res = run_pretrain(&cfg, &common.data, &out)?;
            let means = res.report.epoch_means();
            println!(
                "{} steps, final epoch loss {:.4}; wrote {} and {}",
                res.report.rows.len(),
                means.last().copied().unwrap_or(f64::NAN),
                res.checkpoint.display(),
                res.loss_csv.display()
            );
        }
        Cmd::Finetune {
            common,
            checkpoint,
            task,
            regime,
            fraction,
            seed,
            out,
        } => {
            let cfg = config(common.config.as_deref())?;
            let req = FinetuneRequest {
                task,
                regime,
                fraction,
                seed,
                checkpoint,
            };
            let recs = run_finetune(&cfg, &common.data, &req, &out)?;
            for r in &recs {
                println!("{}", r.csv_row());
            }
            println!("appended {} rows to {}", recs.len(), out.join(RESULTS_FILE).display());
        }
        Cmd::Evaluate {
            data,
            checkpoint,
            task,
            split,
            out,
        } => {
            let rec = run_evaluate(&data, &checkpoint, task, split, &out)?;
            println!("{}", serde_json::to_string(&rec)?);
        }
        Cmd::Sweep {
            common,
            axis,
            values,
            out,
        } => {
            let cfg = config(common.config.as_deref())?;
            let rows = run_sweep(&cfg, &common.data, axis, &values, &out)?;
            println!("{}", ptum::runner::SweepRow::csv_header());
            for r in &rows {
                println!("{}", r.csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
