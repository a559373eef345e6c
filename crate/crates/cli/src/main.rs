//! `permseq`: dataset generation, training, evaluation, planning and reports.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use permseq::data::{generate, DataParams, Experiment};
use permseq::experiments::{eval_checkpoint, load_dataset, plan, report, run_experiment, save_dataset, ExperimentSpec};
use permseq::io::{load_checkpoint, metrics_csv, save_checkpoint, write_atomic};
use permseq::nets::ModelKind;
use permseq::planner::comparison_csv;
use permseq::train_eval::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "permseq", version, about = "Action sequencing with latent permutations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset (tasks.jsonl + manifest.json) for one experiment.
    GenData {
        #[arg(long)]
        experiment: Experiment,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        /// Scrabble action-set size.
        #[arg(long)]
        tiles: Option<usize>,
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train one model on a dataset's training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        hyper: Hyper,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a dataset's test split; one CSV row per model kind.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Kinds sharing the checkpoint's weights (defaults to the stored kind).
        #[arg(long, value_delimiter = ',')]
        model: Vec<ModelKind>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Seeded sweep: generate, train and evaluate every kind into a run directory.
    Run {
        #[arg(long)]
        experiment: Experiment,
        #[arg(long)]
        out: PathBuf,
        /// First seed; runs use `seed..seed+seeds`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeds (default 5, soma 10; larger with --paper-scale).
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        model: Vec<ModelKind>,
        #[arg(long, value_delimiter = ',')]
        train_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        tiles: Vec<usize>,
        #[command(flatten)]
        hyper: Hyper,
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        force: bool,
    },
    /// Warm-start planner comparison for a finished soma run.
    Plan {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Summary, curve and confusion tables for a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// Training overrides; unset flags keep the experiment defaults.
#[derive(Args)]
struct Hyper {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
}

impl Hyper {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.tau {
            cfg.sinkhorn.tau = v;
        }
        if let Some(v) = self.sinkhorn_iters {
            cfg.sinkhorn.iters = v;
        }
        if let Some(v) = self.noise_scale {
            cfg.sinkhorn.noise_scale = v;
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            experiment,
            out,
            seed,
            train_size,
            test_size,
            tiles,
            paper_scale,
            force,
        } => {
            let mut params = DataParams::defaults(experiment, seed, paper_scale);
            params.train_size = train_size.unwrap_or(params.train_size);
            params.test_size = test_size.unwrap_or(params.test_size);
            params.tile_count = tiles.unwrap_or(params.tile_count);
            let data = generate(&params)?;
            save_dataset(&out, &data, force)?;
            println!("wrote {} tasks to {}", data.tasks.len(), out.display());
        }
        Command::Train {
            data,
            model,
            out,
            seed,
            hyper,
            force,
        } => {
            let dataset = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            if !force && out.exists() {
                bail!("{} already exists (pass --force to overwrite)", out.display());
            }
            let mut cfg = ExperimentSpec::desk(dataset.params.experiment, "", false).train;
            cfg.kind = model;
            cfg.seed = seed;
            hyper.apply(&mut cfg);
            let outcome = train(&cfg, &dataset.train(), &dataset.info)?;
            save_checkpoint(&out, &outcome.model, force)?;
            let last = outcome.history.last().copied().unwrap_or(f64::NAN);
            println!("trained {model} for {} epochs, final loss {last:.6}", cfg.epochs);
        }
        Command::Eval {
            data,
            checkpoint,
            model,
            out,
            seed,
            force,
        } => {
            let dataset = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            let kinds = if model.is_empty() {
                vec![load_checkpoint(&checkpoint, None)?.kind]
            } else {
                model
            };
            let rows = eval_checkpoint(&dataset, &checkpoint, &kinds, seed)?;
            write_atomic(&out, metrics_csv(&rows).as_bytes(), force)?;
            for r in &rows {
                println!("{} precision {:.4}", r.model, r.metrics.precision);
            }
        }
        Command::Run {
            experiment,
            out,
            seed,
            seeds,
            model,
            train_sizes,
            tiles,
            hyper,
            paper_scale,
            force,
        } => {
            let mut spec = ExperimentSpec::desk(experiment, out, paper_scale);
            let count = seeds.unwrap_or(spec.seeds.len() as u64);
            spec.seeds = (seed..seed + count).collect();
            if !model.is_empty() {
                spec.kinds = model;
            }
            if !train_sizes.is_empty() {
                spec.train_sizes = train_sizes;
            }
            if !tiles.is_empty() {
                spec.tile_counts = tiles;
            }
            hyper.apply(&mut spec.train);
            let output = run_experiment(&spec, force)?;
            print!("{}", metrics_csv(&output.metrics));
        }
        Command::Plan { run_dir, force } => {
            let rows = plan(&run_dir, force)?;
            print!("{}", comparison_csv(&rows));
        }
        Command::Report { run_dir, force } => {
            let rep = report(&run_dir, force)?;
            println!(
                "wrote {} summary rows and {} confusion tables to {}",
                rep.summary.len(),
                rep.confusions.len(),
                run_dir.join("report").display()
            );
        }
    }
    Ok(())
}
