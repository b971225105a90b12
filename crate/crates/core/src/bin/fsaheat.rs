use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fsaheat::checkpoint::Checkpoint;
use fsaheat::dataset::{build_dataset, split_seeds, LayoutSpec};
use fsaheat::harness::eval::{protocol_data_dir, TEST_SPLIT};
use fsaheat::harness::{ablate, evaluate, predict, train, PredictInput, Protocol, TrainConfig};
use fsaheat::Result;

#[derive(Parser)]
#[command(name = "fsaheat", version, about = "Chiplet-stack thermal data generation and field prediction")]
struct Cli {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Grid size N for an N×N grid, overriding the configuration.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Sample count, overriding the configuration.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and store a dataset.
    Generate {
        /// Seed stream name.
        #[arg(long, default_value = "train")]
        split: String,
        /// Generate a protocol's test set instead.
        #[arg(long)]
        protocol: Option<Protocol>,
    },
    /// Train a network and write checkpoints.
    Train,
    /// Score a checkpoint under an evaluation protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// in-dist, k+50, k-50, sources-N, ablation-grid, or all.
        #[arg(long, default_value = "in-dist")]
        protocol: String,
    },
    /// Predict one sample and export fields as CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON layout to predict instead of a generated sample.
        #[arg(long, conflicts_with = "zero_power")]
        layout: Option<PathBuf>,
        /// Predict a stack without heat sources.
        #[arg(long)]
        zero_power: bool,
    },
    /// Train and score every ablation variant.
    Ablate,
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(g) = cli.grid {
        cfg = cfg.with_grid(g);
    }
    Ok(cfg)
}

/// Without an explicit configuration, evaluation and prediction follow the
/// checkpoint's network and grid.
fn adopt_checkpoint(cli: &Cli, cfg: &mut TrainConfig, checkpoint: &Path) -> Result<()> {
    if cli.config.is_none() {
        let m = Checkpoint::load(checkpoint, None)?.manifest;
        cfg.net = m.net;
        if cli.grid.is_none() {
            cfg.dataset.stack.rows = m.normalization.rows;
            cfg.dataset.stack.cols = m.normalization.cols;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default));
    match &cli.command {
        Command::Generate { split, protocol } => {
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let (spec, split, n, dir) = match protocol {
                Some(p) => {
                    let n = cli.n.unwrap_or(cfg.data.n_test);
                    (p.dataset_spec(&cfg.dataset)?, TEST_SPLIT.to_string(), n, protocol_data_dir(&out("generate"), *p))
                }
                None => {
                    let n = cli.n.unwrap_or(cfg.data.n_train);
                    (cfg.dataset.clone(), split.clone(), n, out("generate").join("data").join(split))
                }
            };
            let m = build_dataset(&spec, n, cfg.seed, &split, &dir, cfg.data.thread_count())?;
            println!("{} samples written to {} (digest {})", m.count, dir.display(), m.data_digest);
        }
        Command::Train => {
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = cli.n {
                cfg.data.n_train = n;
            }
            let dir = out("train");
            let s = train(&cfg, &dir)?;
            println!(
                "best epoch {} (validation rmse {}), checkpoint {}",
                s.best_epoch,
                s.best_val_rmse.map_or("-".into(), |v| format!("{v:.6e}")),
                s.best_checkpoint.display()
            );
        }
        Command::Evaluate { checkpoint, protocol } => {
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = cli.n {
                cfg.data.n_test = n;
            }
            let dir = out("evaluate");
            let protocols = match protocol.as_str() {
                "all" => Protocol::generalization(),
                p => vec![p.parse()?],
            };
            if protocols == [Protocol::AblationGrid] {
                let r = ablate(&cfg, &dir)?;
                print_ablation(&r);
                return Ok(());
            }
            let checkpoint = checkpoint.as_ref().ok_or_else(|| {
                fsaheat::Error::InvalidArgument("--checkpoint is required for this protocol".into())
            })?;
            adopt_checkpoint(&cli, &mut cfg, checkpoint)?;
            for p in protocols {
                let r = evaluate(checkpoint, p, &cfg, &dir)?;
                println!(
                    "{p}: {} samples, rmse {:.6e}, mae {:.6e}, psnr {:.2} dB, baseline rmse {:.6e}",
                    r.sample_count, r.aggregate.rmse, r.aggregate.mae, r.aggregate.psnr, r.baseline_rmse
                );
            }
        }
        Command::Predict { checkpoint, layout, zero_power } => {
            adopt_checkpoint(&cli, &mut cfg, checkpoint)?;
            let (rows, cols) = (cfg.dataset.stack.rows, cfg.dataset.stack.cols);
            let input = if *zero_power {
                PredictInput::Layout(LayoutSpec { seed: 0, rows, cols, sources: Vec::new() })
            } else if let Some(path) = layout {
                PredictInput::Layout(serde_json::from_slice(&std::fs::read(path)?)?)
            } else {
                let seed = cli.seed.unwrap_or_else(|| split_seeds(cfg.seed, TEST_SPLIT, 1)[0]);
                PredictInput::Seed(seed)
            };
            let expected = cli.config.is_some().then_some(&cfg.net);
            let p = predict(checkpoint, expected, &cfg.dataset, &input, &out("predict"))?;
            println!(
                "predicted {}x{} in {:.3} s, max abs error {:.4e} K",
                rows, cols, p.summary.predict_seconds, p.summary.max_abs_error
            );
        }
        Command::Ablate => {
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = cli.n {
                cfg.data.n_train = n;
            }
            let r = ablate(&cfg, &out("ablate"))?;
            print_ablation(&r);
        }
    }
    Ok(())
}

fn print_ablation(r: &fsaheat::harness::AblationReport) {
    for row in &r.rows {
        println!(
            "{:<13} params {:>8}  test rmse {:.6e}  audit {}",
            row.variant.to_string(),
            row.audit.param_count,
            row.test.rmse,
            if row.audit.passed { "ok" } else { "FAILED" }
        );
    }
    for t in &r.trends {
        println!("trend `{}`: {}", t.claim, if t.observed { "observed" } else { "not observed" });
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
