//! Command line front end: training, evaluation, prediction, dataset
//! generation and standalone scoring.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input, 3 non-finite
//! loss during training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use changetok::data_model::TaskKind;
use changetok::datagen::{ingest_directory, write_dataset, write_synthetic, DatasetLayout, SyntheticSpec};
use changetok::harness::{evaluate_checkpoint, predict_files, score_directories, TrainConfig, Trainer, CHECKPOINT_FILE};
use changetok::metrics::MetricReport;
use changetok::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "changetok", version, about = "Text-instructed binary and semantic change detection")]
struct Cli {
    /// Log progress to stderr (repeat for per-step losses).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML or JSON config; writes the checkpoint and loss log to OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Print a fixed-width table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Predict masks for one image pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        /// bcd or scd.
        #[arg(long)]
        task: TaskKind,
        /// Comma-separated class names; empty means generic change.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a side-by-side composite figure.
        #[arg(long)]
        figure: bool,
    },
    /// Write a synthetic dataset described by a TOML or JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a public dataset directory into a manifest dataset.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// whu, levir, s2looking or second.
        #[arg(long)]
        layout: DatasetLayout,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ingested")]
        source_id: String,
    },
    /// Score predicted mask PNGs against ground truth PNGs of the same names.
    Metrics {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        table: bool,
    },
}

fn print_report(r: &MetricReport, table: bool) -> Result<()> {
    if table {
        print!("{}", r.table());
    } else {
        println!("{}", serde_json::to_string_pretty(r)?);
    }
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let mut cfg = TrainConfig::from_file(config)?;
    cfg.checkpoint_dir = Some(out.to_path_buf());
    let mut trainer = Trainer::from_config(cfg)?;
    trainer.run()?;
    let log = out.join("losses.json");
    let text = serde_json::to_string_pretty(trainer.log())?;
    std::fs::write(&log, text).map_err(|e| Error::Io {
        path: log.clone(),
        source: e,
    })?;
    match trainer.log().last() {
        Some(last) => println!(
            "{} steps, final loss {:.5}; checkpoint {}",
            trainer.step_count(),
            last.total,
            out.join(CHECKPOINT_FILE).display()
        ),
        None => println!("no steps run; checkpoint {}", out.join(CHECKPOINT_FILE).display()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval {
            ckpt,
            manifest,
            split,
            table,
        } => print_report(&evaluate_checkpoint(&ckpt, &manifest, &split)?, table),
        Command::Predict {
            ckpt,
            t1,
            t2,
            task,
            classes,
            out,
            figure,
        } => {
            let classes: Vec<String> = classes.into_iter().filter(|c| !c.trim().is_empty()).collect();
            for p in predict_files(&ckpt, &t1, &t2, task, &classes, &out, figure)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::GenData { spec, out } => {
            let m = write_synthetic(&SyntheticSpec::from_file(&spec)?, &out)?;
            let counts: Vec<String> = m.splits.iter().map(|(k, v)| format!("{k} {}", v.len())).collect();
            println!("{} ({})", out.join("manifest.json").display(), counts.join(", "));
            Ok(())
        }
        Command::Ingest {
            input,
            layout,
            out,
            source_id,
        } => {
            let (task, vocab, splits) = ingest_directory(&input, layout, &source_id)?;
            write_dataset(&out, &source_id, task, &vocab, &splits, 0)?;
            println!("{}", out.join("manifest.json").display());
            Ok(())
        }
        Command::Metrics {
            pred_dir,
            gt_dir,
            num_classes,
            table,
        } => print_report(&score_directories(&pred_dir, &gt_dir, num_classes)?, table),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                Error::NonFinite { .. } => 3,
                e if e.is_validation() => 2,
                _ => 1,
            })
        }
    }
}
