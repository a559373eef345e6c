//! Experiment orchestration: seeded train/eval sweeps, the planner
//! warm-start comparison on soma, and report tables built from a run
//! directory.
//!
//! A run directory looks like
//!
//! ```text
//! run.json                 the ExperimentSpec that produced it
//! metrics.csv              one row per (experiment, model, seed, size)
//! timings.csv              wall-clock training time per trained family
//! checkpoints/<tag>_<family>.ckpt
//! losses/<tag>_<family>.csv
//! predictions/<tag>_<model>.json
//! planner.csv              written by `plan`
//! report/                  written by `report`
//! ```
//!
//! where `<tag>` is `<experiment>_a<actions>_n<train size>_s<seed>`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{generate, tasks_from_jsonl, tasks_to_jsonl, DataError, DataParams, Dataset, Experiment, Manifest};
use crate::envs::soma::solve_cube;
use crate::envs::{Confusion, EnvError};
use crate::io::{
    load_checkpoint, metrics_csv, parse_metrics_csv, read_text, save_checkpoint, write_atomic, IoError, MetricsRow,
};
use crate::nets::{Family, ModelKind};
use crate::planner::{comparison_csv, mean_std, plan_runs, summarize, ComparisonRow, Initializer, PlanError};
use crate::train_eval::{evaluate, predict, train, Model, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExpError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Everything needed to reproduce one sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub kinds: Vec<ModelKind>,
    /// Each seed drives data sampling, the split and weight init.
    pub seeds: Vec<u64>,
    /// Template; seed, train size and tile count are set per run.
    pub data: DataParams,
    /// Training-set sizes to sweep (precision-vs-data curves).
    pub train_sizes: Vec<usize>,
    /// Scrabble action-set sizes to sweep.
    pub tile_counts: Vec<usize>,
    /// Template; kind and seed are set per run.
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// Desk-scale settings that train in minutes on one core.
    pub fn desk(experiment: Experiment, out_dir: impl Into<PathBuf>, paper_scale: bool) -> Self {
        let data = DataParams::defaults(experiment, 0, paper_scale);
        let mut train = TrainConfig::new(ModelKind::Sinkhorn);
        let mut seeds: Vec<u64> = (0..if paper_scale { 20 } else { 5 }).collect();
        let mut tile_counts = vec![data.tile_count];
        match experiment {
            Experiment::TowerFixed => train.epochs = 200,
            Experiment::TowerUnique => {
                train.epochs = 300;
                train.learning_rate = 1e-3;
            }
            Experiment::TowerSubsets => {
                train.epochs = 200;
                train.learning_rate = 1e-3;
            }
            Experiment::Soma => {
                train.epochs = 500;
                train.learning_rate = 1e-3;
                seeds = (0..if paper_scale { 100 } else { 10 }).collect();
            }
            Experiment::Scrabble => {
                train.epochs = if paper_scale { 5000 } else { 45 };
                train.learning_rate = 1e-3;
                train.sinkhorn.noise_scale = 0.3;
                train.sinkhorn.iters = 10;
                tile_counts = if paper_scale { vec![10, 26, 52, 98] } else { vec![10, 26, 52] };
            }
        }
        ExperimentSpec {
            experiment,
            kinds: ModelKind::ALL.to_vec(),
            seeds,
            train_sizes: vec![data.train_size],
            tile_counts,
            data,
            train,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ExpError> {
        if self.kinds.is_empty() || self.seeds.is_empty() || self.train_sizes.is_empty() || self.tile_counts.is_empty() {
            return Err(ExpError::Invalid("spec needs at least one kind, seed, train size and tile count".into()));
        }
        if self.data.experiment != self.experiment {
            return Err(ExpError::Invalid("dataset params belong to another experiment".into()));
        }
        Ok(self.train.validate()?)
    }

    /// Dataset of one run.
    pub fn dataset(&self, key: &RunKey) -> Result<Dataset, ExpError> {
        Ok(generate(&self.data_params(key))?)
    }

    fn data_params(&self, key: &RunKey) -> DataParams {
        DataParams {
            seed: key.seed,
            train_size: key.train_size,
            tile_count: key.actions_hint,
            ..self.data.clone()
        }
    }

    /// Training families in first-appearance order of `kinds`.
    pub fn families(&self) -> Vec<Family> {
        let mut out = Vec::new();
        for k in &self.kinds {
            if !out.contains(&k.family()) {
                out.push(k.family());
            }
        }
        out
    }

    pub fn keys(&self) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for &tiles in &self.tile_counts {
            for &train_size in &self.train_sizes {
                for &seed in &self.seeds {
                    keys.push(RunKey {
                        experiment: self.experiment,
                        actions_hint: tiles,
                        train_size,
                        seed,
                    });
                }
            }
        }
        keys
    }
}

/// One point of the sweep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunKey {
    pub experiment: Experiment,
    /// Tile count for scrabble; ignored elsewhere.
    pub actions_hint: usize,
    pub train_size: usize,
    pub seed: u64,
}

fn tag(experiment: Experiment, actions: usize, train_size: usize, seed: u64) -> String {
    format!("{experiment}_a{actions}_n{train_size}_s{seed}")
}

pub fn checkpoint_path(dir: &Path, run_tag: &str, family: Family) -> PathBuf {
    dir.join("checkpoints").join(format!("{run_tag}_{}.ckpt", family.name()))
}

/// Model outputs on one test split, kept for confusion tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub experiment: Experiment,
    pub model: ModelKind,
    pub seed: u64,
    pub train_size: usize,
    pub actions: usize,
    pub symbols: Vec<String>,
    pub action_symbol: Vec<usize>,
    pub task_ids: Vec<usize>,
    pub truths: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub experiment: String,
    pub family: Family,
    pub seed: u64,
    pub train_size: usize,
    pub actions: usize,
    pub train_time_s: f64,
}

pub const TIMINGS_HEADER: &str = "experiment,family,seed,train_size,actions,train_time_s";

fn timings_csv(rows: &[TimingRow]) -> String {
    let mut s = format!("{TIMINGS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.experiment,
            r.family.name(),
            r.seed,
            r.train_size,
            r.actions,
            r.train_time_s
        ));
    }
    s
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, v) in history.iter().enumerate() {
        s.push_str(&format!("{},{v:.9}\n", i + 1));
    }
    s
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, ExpError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub timings: Vec<TimingRow>,
}

/// Runs `work` over `items` on up to `available_parallelism` threads and
/// returns results in item order.
fn parallel_map<T: Sync, R: Send>(items: &[T], work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = work(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

/// Trains each family once per run key, evaluates every requested kind on
/// the test split and writes the run directory.
pub fn run_experiment(spec: &ExperimentSpec, force: bool) -> Result<RunOutput, ExpError> {
    spec.validate()?;
    let dir = &spec.out_dir;
    let metrics_path = dir.join("metrics.csv");
    if !force && metrics_path.exists() {
        return Err(IoError::Exists(metrics_path.display().to_string()).into());
    }
    write_atomic(&dir.join("run.json"), &to_json(spec)?, true)?;
    let results = parallel_map(&spec.keys(), |key| run_one(spec, key));
    let mut out = RunOutput {
        metrics: Vec::new(),
        timings: Vec::new(),
    };
    for r in results {
        let (m, t) = r?;
        out.metrics.extend(m);
        out.timings.extend(t);
    }
    write_atomic(&dir.join("timings.csv"), timings_csv(&out.timings).as_bytes(), true)?;
    write_atomic(&metrics_path, metrics_csv(&out.metrics).as_bytes(), true)?;
    Ok(out)
}

fn run_one(spec: &ExperimentSpec, key: &RunKey) -> Result<(Vec<MetricsRow>, Vec<TimingRow>), ExpError> {
    let data = spec.dataset(key)?;
    let actions = data.info.n_actions;
    let run_tag = tag(spec.experiment, actions, key.train_size, key.seed);
    let (train_set, test_set) = (data.train(), data.test());
    let mut metrics = Vec::new();
    let mut timings = Vec::new();
    for family in spec.families() {
        let lead = *spec.kinds.iter().find(|k| k.family() == family).expect("family comes from kinds");
        let cfg = TrainConfig {
            kind: lead,
            seed: key.seed,
            ..spec.train.clone()
        };
        let start = Instant::now();
        let outcome = train(&cfg, &train_set, &data.info)?;
        timings.push(TimingRow {
            experiment: spec.experiment.to_string(),
            family,
            seed: key.seed,
            train_size: key.train_size,
            actions,
            train_time_s: start.elapsed().as_secs_f64(),
        });
        let stem = format!("{run_tag}_{}", family.name());
        save_checkpoint(&checkpoint_path(&spec.out_dir, &run_tag, family), &outcome.model, true)?;
        write_atomic(
            &spec.out_dir.join("losses").join(format!("{stem}.csv")),
            loss_csv(&outcome.history).as_bytes(),
            true,
        )?;
        for &kind in spec.kinds.iter().filter(|k| k.family() == family) {
            let model = outcome.model.with_kind(kind)?;
            let (m, preds) = evaluate(&model, &test_set, &data.info)?;
            let record = PredictionRecord {
                experiment: spec.experiment,
                model: kind,
                seed: key.seed,
                train_size: key.train_size,
                actions,
                symbols: data.info.symbols.clone(),
                action_symbol: data.info.action_symbol.clone(),
                task_ids: test_set.iter().map(|t| t.task_id).collect(),
                truths: test_set.iter().map(|t| t.actions.clone()).collect(),
                preds,
            };
            write_atomic(
                &spec.out_dir.join("predictions").join(format!("{run_tag}_{kind}.json")),
                &serde_json::to_vec(&record)?,
                true,
            )?;
            metrics.push(MetricsRow {
                experiment: spec.experiment.to_string(),
                model: kind.to_string(),
                seed: key.seed,
                train_size: key.train_size,
                actions,
                metrics: m,
            });
        }
    }
    // rows in kind order regardless of family training order
    metrics.sort_by_key(|r| spec.kinds.iter().position(|k| k.name() == r.model));
    Ok((metrics, timings))
}

pub fn read_spec(run_dir: &Path) -> Result<ExperimentSpec, ExpError> {
    let mut spec: ExperimentSpec = serde_json::from_str(&read_text(&run_dir.join("run.json"))?)?;
    spec.out_dir = run_dir.to_path_buf();
    Ok(spec)
}

/// Warm-start comparison on the soma test splits of a finished run. Rows:
/// random, one per permutation-constrained kind, then ground-truth labels.
pub fn plan(run_dir: &Path, force: bool) -> Result<Vec<ComparisonRow>, ExpError> {
    let spec = read_spec(run_dir)?;
    if spec.experiment != Experiment::Soma {
        return Err(ExpError::Invalid(format!("planning needs a soma run, found {}", spec.experiment)));
    }
    let out_path = run_dir.join("planner.csv");
    if !force && out_path.exists() {
        return Err(IoError::Exists(out_path.display().to_string()).into());
    }
    let solutions = solve_cube()?;
    let kinds: Vec<ModelKind> = spec.kinds.iter().copied().filter(|k| k.is_permutation_constrained()).collect();
    let mut pooled: Vec<(String, Vec<f64>, usize)> = std::iter::once("random".to_string())
        .chain(kinds.iter().map(|k| k.to_string()))
        .chain(std::iter::once("oracle".to_string()))
        .map(|name| (name, Vec::new(), 0))
        .collect();
    let base = spec.dataset(&spec.keys()[0])?;
    for key in spec.keys() {
        let data = base.resplit(key.train_size, spec.data.test_size, key.seed)?;
        let test = data.test();
        let sols: Vec<_> = test.iter().map(|t| solutions[t.task_id].clone()).collect();
        let rasters: Vec<&[f64]> = test.iter().map(|t| t.raster.as_slice()).collect();
        let run_tag = tag(spec.experiment, data.info.n_actions, key.train_size, key.seed);
        let mut inits = vec![Initializer::Random];
        for &kind in &kinds {
            let model = load_checkpoint(&checkpoint_path(run_dir, &run_tag, kind.family()), Some(kind))?;
            let orders = predict(&model, &rasters)?
                .into_iter()
                .map(|p| p.into_iter().map(|a| a as u8 + 1).collect())
                .collect();
            inits.push(Initializer::Fixed {
                name: kind.to_string(),
                orders,
            });
        }
        inits.push(Initializer::Fixed {
            name: "oracle".into(),
            orders: sols.iter().map(|s| s.label_order.clone()).collect(),
        });
        for (init, slot) in inits.iter().zip(pooled.iter_mut()) {
            let (iters, failures) = plan_runs(init, &sols, &[key.seed])?;
            slot.1.extend(iters);
            slot.2 += failures;
        }
    }
    let rows: Vec<ComparisonRow> = pooled.iter().map(|(n, it, f)| summarize(n, it, *f)).collect();
    write_atomic(&out_path, comparison_csv(&rows).as_bytes(), true)?;
    Ok(rows)
}

/// Mean and population std of each metric over the seeds of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub model: String,
    pub actions: usize,
    pub train_size: usize,
    pub runs: usize,
    pub precision: (f64, f64),
    pub exact_rate: (f64, f64),
    pub repetition_rate: (f64, f64),
    pub length_acc: (f64, f64),
}

pub const SUMMARY_HEADER: &str = "experiment,model,actions,train_size,runs,precision_mean,precision_std,exact_rate_mean,exact_rate_std,repetition_rate_mean,repetition_rate_std,length_acc_mean,length_acc_std";
pub const CURVE_HEADER: &str = "experiment,actions,train_size,model,precision_mean,precision_std,runs";

type GroupKey = (String, usize, usize, String);

pub fn summarize_metrics(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.experiment.clone(), r.actions, r.train_size, r.model.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((experiment, actions, train_size, model), rs)| {
            let stat = |f: fn(&MetricsRow) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                experiment,
                model,
                actions,
                train_size,
                runs: rs.len(),
                precision: stat(|r| r.metrics.precision),
                exact_rate: stat(|r| r.metrics.exact_rate),
                repetition_rate: stat(|r| r.metrics.repetition_rate),
                length_acc: stat(|r| r.metrics.length_acc),
            }
        })
        .collect()
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.experiment,
            r.model,
            r.actions,
            r.train_size,
            r.runs,
            r.precision.0,
            r.precision.1,
            r.exact_rate.0,
            r.exact_rate.1,
            r.repetition_rate.0,
            r.repetition_rate.1,
            r.length_acc.0,
            r.length_acc.1
        ));
    }
    s
}

fn curve_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{}\n",
            r.experiment, r.actions, r.train_size, r.model, r.precision.0, r.precision.1, r.runs
        ));
    }
    s
}

fn confusion_csv(c: &Confusion) -> String {
    let mut s = format!("truth,{},none\n", c.symbols.join(","));
    for (sym, row) in c.symbols.iter().zip(&c.counts) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        s.push_str(&format!("{sym},{}\n", cells.join(",")));
    }
    s
}

pub fn confusion_of(record: &PredictionRecord) -> Confusion {
    Confusion::build(&record.preds, &record.truths, record.symbols.clone(), |a| record.action_symbol[a])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutput {
    pub summary: Vec<SummaryRow>,
    /// File stem (without `.csv`) to aggregated confusion counts.
    pub confusions: BTreeMap<String, Confusion>,
}

/// Aggregates `metrics.csv` and the prediction files into `report/`.
pub fn report(run_dir: &Path, force: bool) -> Result<ReportOutput, ExpError> {
    let metrics_path = run_dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(ExpError::Invalid(format!("{} has no metrics.csv", run_dir.display())));
    }
    let rows = parse_metrics_csv(&read_text(&metrics_path)?)?;
    if rows.is_empty() {
        return Err(ExpError::Invalid(format!("{} holds no metrics rows", metrics_path.display())));
    }
    let out = run_dir.join("report");
    let summary = summarize_metrics(&rows);
    write_atomic(&out.join("summary.csv"), summary_csv(&summary).as_bytes(), force)?;
    write_atomic(&out.join("curves.csv"), curve_csv(&summary).as_bytes(), force)?;

    let mut confusions: BTreeMap<String, Confusion> = BTreeMap::new();
    let pred_dir = run_dir.join("predictions");
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&pred_dir) {
        Ok(entries) => entries.filter_map(|e| e.ok().map(|e| e.path())).collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    for path in files.iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
        let record: PredictionRecord = serde_json::from_str(&read_text(path)?)?;
        let stem = format!(
            "confusion_{}_{}_a{}_n{}",
            record.experiment, record.model, record.actions, record.train_size
        );
        let c = confusion_of(&record);
        match confusions.get_mut(&stem) {
            Some(acc) => merge_confusion(acc, &c),
            None => {
                confusions.insert(stem, c);
            }
        }
    }
    let mut repetition = String::from("experiment_stem,repeated_symbols,positions,errors\n");
    for (stem, c) in &confusions {
        write_atomic(&out.join(format!("{stem}.csv")), confusion_csv(c).as_bytes(), force)?;
        for (reps, b) in &c.by_repetition {
            repetition.push_str(&format!("{},{reps},{},{}\n", stem.trim_start_matches("confusion_"), b.positions, b.errors));
        }
    }
    write_atomic(&out.join("repetition_errors.csv"), repetition.as_bytes(), force)?;
    Ok(ReportOutput { summary, confusions })
}

fn merge_confusion(acc: &mut Confusion, other: &Confusion) {
    for (ra, rb) in acc.counts.iter_mut().zip(&other.counts) {
        for (a, b) in ra.iter_mut().zip(rb) {
            *a += b;
        }
    }
    for (k, b) in &other.by_repetition {
        let e = acc.by_repetition.entry(*k).or_default();
        e.positions += b.positions;
        e.errors += b.errors;
    }
}

/// Writes `tasks.jsonl` and `manifest.json` into `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset, force: bool) -> Result<(), ExpError> {
    write_atomic(&dir.join("tasks.jsonl"), tasks_to_jsonl(&data.tasks, &data.info)?.as_bytes(), force)?;
    write_atomic(&dir.join("manifest.json"), &to_json(&data.manifest())?, force)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, ExpError> {
    let manifest: Manifest = serde_json::from_str(&read_text(&dir.join("manifest.json"))?)?;
    let tasks = tasks_from_jsonl(&read_text(&dir.join("tasks.jsonl"))?, &manifest.info)?;
    Ok(Dataset::from_parts(manifest, tasks)?)
}

/// Evaluates a checkpoint on a dataset's test split as each of `kinds`.
pub fn eval_checkpoint(
    data: &Dataset,
    checkpoint: &Path,
    kinds: &[ModelKind],
    seed: u64,
) -> Result<Vec<MetricsRow>, ExpError> {
    let test = data.test();
    kinds
        .iter()
        .map(|&kind| {
            let model: Model = load_checkpoint(checkpoint, Some(kind))?;
            let (m, _) = evaluate(&model, &test, &data.info)?;
            Ok(MetricsRow {
                experiment: data.params.experiment.to_string(),
                model: kind.to_string(),
                seed,
                train_size: data.train_ids.len(),
                actions: data.info.n_actions,
                metrics: m,
            })
        })
        .collect()
}
