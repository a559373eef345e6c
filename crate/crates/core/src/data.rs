//! Experiment datasets: generation from the environments and the on-disk
//! format (a JSONL task file plus a JSON manifest).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::envs::{scrabble, soma, tower, EnvError, TaskInstance};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    TowerFixed,
    TowerUnique,
    TowerSubsets,
    Soma,
    Scrabble,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::TowerFixed,
        Experiment::TowerUnique,
        Experiment::TowerSubsets,
        Experiment::Soma,
        Experiment::Scrabble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::TowerFixed => "tower_fixed",
            Experiment::TowerUnique => "tower_unique",
            Experiment::TowerSubsets => "tower_subsets",
            Experiment::Soma => "soma",
            Experiment::Scrabble => "scrabble",
        }
    }

    pub fn env(self) -> &'static str {
        match self {
            Experiment::TowerFixed | Experiment::TowerUnique | Experiment::TowerSubsets => "tower",
            Experiment::Soma => "soma",
            Experiment::Scrabble => "scrabble",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| DataError::UnknownExperiment(s.to_string()))
    }
}

/// Sizes and generator settings for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataParams {
    pub experiment: Experiment,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    /// Scrabble only: how many of the 98 tiles form the action set.
    pub tile_count: usize,
}

impl DataParams {
    /// Desk-scale defaults; `paper_scale` switches scrabble to 10000/5000.
    pub fn defaults(experiment: Experiment, seed: u64, paper_scale: bool) -> Self {
        let (train_size, test_size) = match experiment {
            Experiment::TowerFixed => (200, 100),
            Experiment::TowerUnique => (720, 0),
            Experiment::TowerSubsets => (1300, 650),
            Experiment::Soma => (120, 120),
            Experiment::Scrabble if paper_scale => (10000, 5000),
            Experiment::Scrabble => (2000, 500),
        };
        DataParams {
            experiment,
            seed,
            train_size,
            test_size,
            tile_count: 26,
        }
    }
}

/// What the actions mean and how rasters are laid out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub env: String,
    pub n_actions: usize,
    pub max_len: usize,
    pub variable_length: bool,
    /// Nesting used for rasters in the task file; the product is the raster length.
    pub raster_shape: Vec<usize>,
    /// Display names of the visual symbols (colours, letters, pieces).
    pub symbols: Vec<String>,
    /// Symbol index of each action.
    pub action_symbol: Vec<usize>,
}

impl EnvInfo {
    pub fn raster_dim(&self) -> usize {
        self.raster_shape.iter().product()
    }

    pub fn symbol_sequence(&self, actions: &[usize]) -> Vec<usize> {
        actions.iter().map(|&a| self.action_symbol[a]).collect()
    }
}

/// A task pool with its train/test split (lists of task ids).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: DataParams,
    pub info: EnvInfo,
    pub tasks: Vec<TaskInstance>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Dataset {
    pub fn train(&self) -> Vec<TaskInstance> {
        self.select(&self.train_ids)
    }

    pub fn test(&self) -> Vec<TaskInstance> {
        self.select(&self.test_ids)
    }

    fn select(&self, ids: &[usize]) -> Vec<TaskInstance> {
        ids.iter().map(|&i| self.tasks[i].clone()).collect()
    }

    /// Same pool, new seeded split with the given sizes (test may be 0, in
    /// which case it equals the training set).
    pub fn resplit(&self, train_size: usize, test_size: usize, seed: u64) -> Result<Dataset, DataError> {
        let (train_ids, test_ids) = split_ids(self.tasks.len(), train_size, test_size, seed)?;
        Ok(Dataset {
            params: DataParams {
                train_size,
                test_size,
                seed,
                ..self.params.clone()
            },
            train_ids,
            test_ids,
            ..self.clone()
        })
    }
}

fn split_ids(pool: usize, train: usize, test: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if train == 0 || train + test > pool {
        return Err(DataError::Invalid(format!(
            "split {train}/{test} does not fit a pool of {pool}"
        )));
    }
    let mut ids: Vec<usize> = (0..pool).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    ids.shuffle(&mut rng);
    let train_ids = ids[..train].to_vec();
    let test_ids = if test == 0 {
        train_ids.clone()
    } else {
        ids[train..train + test].to_vec()
    };
    Ok((train_ids, test_ids))
}

fn tower_info(blocks: &tower::BlockSet, variable_length: bool) -> EnvInfo {
    let mut symbols: Vec<String> = Vec::new();
    let mut action_symbol = Vec::new();
    for b in 0..blocks.len() {
        let name = blocks.colour(b).name().to_string();
        let idx = symbols.iter().position(|s| *s == name).unwrap_or_else(|| {
            symbols.push(name);
            symbols.len() - 1
        });
        action_symbol.push(idx);
    }
    EnvInfo {
        env: "tower".into(),
        n_actions: blocks.len(),
        max_len: blocks.len(),
        variable_length,
        raster_shape: vec![blocks.len(), 3],
        symbols,
        action_symbol,
    }
}

pub fn soma_info() -> EnvInfo {
    EnvInfo {
        env: "soma".into(),
        n_actions: soma::PIECES,
        max_len: soma::PIECES,
        variable_length: false,
        raster_shape: vec![4, 3, 3, 3],
        symbols: soma::pieces().iter().map(|p| p.name.to_string()).collect(),
        action_symbol: (0..soma::PIECES).collect(),
    }
}

fn scrabble_info(tiles: &scrabble::TileSet) -> EnvInfo {
    EnvInfo {
        env: "scrabble".into(),
        n_actions: tiles.len(),
        max_len: scrabble::MAX_WORD,
        variable_length: true,
        raster_shape: vec![scrabble::MAX_WORD, scrabble::ALPHABET],
        symbols: (0..scrabble::ALPHABET).map(|i| ((b'A' + i as u8) as char).to_string()).collect(),
        action_symbol: (0..tiles.len()).map(|t| tiles.letter_index(t)).collect(),
    }
}

/// Builds the full task pool and split for an experiment.
pub fn generate(params: &DataParams) -> Result<Dataset, DataError> {
    let (info, tasks, train_ids, test_ids) = match params.experiment {
        Experiment::TowerFixed => {
            let blocks = tower::BlockSet::standard();
            let n = params.train_size + params.test_size;
            let demos = tower::sample_demos(&blocks, n, &[blocks.len()], params.seed)?;
            let tasks = demos.iter().enumerate().map(|(i, t)| tower::to_instance(i, t, &blocks)).collect();
            let (train, test) = split_ids(n, params.train_size, params.test_size, params.seed)?;
            (tower_info(&blocks, false), tasks, train, test)
        }
        Experiment::TowerUnique | Experiment::TowerSubsets => {
            let (blocks, lengths, variable) = if params.experiment == Experiment::TowerUnique {
                (tower::BlockSet::unique(), vec![6], false)
            } else {
                (tower::BlockSet::standard(), vec![2, 3, 4, 5, 6], true)
            };
            let all = tower::enumerate_towers(&blocks, &lengths)?;
            let tasks: Vec<_> = all.iter().enumerate().map(|(i, t)| tower::to_instance(i, t, &blocks)).collect();
            let (train, test) = split_ids(tasks.len(), params.train_size, params.test_size, params.seed)?;
            (tower_info(&blocks, variable), tasks, train, test)
        }
        Experiment::Soma => {
            let sols = soma::solve_cube()?;
            let tasks: Vec<_> = sols.iter().enumerate().map(|(i, s)| soma::to_instance(i, s)).collect();
            let (train, test) = split_ids(tasks.len(), params.train_size, params.test_size, params.seed)?;
            (soma_info(), tasks, train, test)
        }
        Experiment::Scrabble => {
            let tiles = scrabble::subset_tileset(params.tile_count, params.seed)?;
            let (train, test) = scrabble::sample_words(&tiles, params.train_size, params.test_size, params.seed)?;
            let train_ids = (0..train.len()).collect();
            let test_ids = (train.len()..train.len() + test.len()).collect();
            let tasks = train.into_iter().chain(test).collect();
            (scrabble_info(&tiles), tasks, train_ids, test_ids)
        }
    };
    Ok(Dataset {
        params: params.clone(),
        info,
        tasks,
        train_ids,
        test_ids,
    })
}

fn nest(values: &[f64], shape: &[usize]) -> Value {
    if shape.len() <= 1 {
        return json!(values);
    }
    let chunk = values.len() / shape[0];
    Value::Array(values.chunks(chunk).map(|c| nest(c, &shape[1..])).collect())
}

fn flatten(v: &Value, out: &mut Vec<f64>) -> Result<(), String> {
    match v {
        Value::Array(items) => items.iter().try_for_each(|x| flatten(x, out)),
        Value::Number(n) => {
            out.push(n.as_f64().ok_or("raster value is not a float")?);
            Ok(())
        }
        other => Err(format!("unexpected raster value {other}")),
    }
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    task_id: usize,
    raster: Value,
    actions: Vec<usize>,
    length: usize,
    env: String,
}

/// One JSON object per task, in task-id order.
pub fn tasks_to_jsonl(tasks: &[TaskInstance], info: &EnvInfo) -> Result<String, DataError> {
    let mut out = String::new();
    for t in tasks {
        let rec = TaskRecord {
            task_id: t.task_id,
            raster: nest(&t.raster, &info.raster_shape),
            actions: t.actions.clone(),
            length: t.len(),
            env: info.env.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn tasks_from_jsonl(text: &str, info: &EnvInfo) -> Result<Vec<TaskInstance>, DataError> {
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: String| DataError::Parse { line: i + 1, msg };
        let rec: TaskRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let mut raster = Vec::new();
        flatten(&rec.raster, &mut raster).map_err(err)?;
        if raster.len() != info.raster_dim() {
            return Err(err(format!("raster has {} values, expected {}", raster.len(), info.raster_dim())));
        }
        if rec.length != rec.actions.len() || rec.env != info.env {
            return Err(err("length or env field disagrees with the record".into()));
        }
        if rec.actions.iter().any(|&a| a >= info.n_actions) || rec.task_id != tasks.len() {
            return Err(err("action out of range or task ids out of order".into()));
        }
        tasks.push(TaskInstance {
            task_id: rec.task_id,
            raster,
            actions: rec.actions,
        });
    }
    Ok(tasks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: DataParams,
    pub info: EnvInfo,
    pub task_count: usize,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Dataset {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            params: self.params.clone(),
            info: self.info.clone(),
            task_count: self.tasks.len(),
            train_ids: self.train_ids.clone(),
            test_ids: self.test_ids.clone(),
        }
    }

    pub fn from_parts(manifest: Manifest, tasks: Vec<TaskInstance>) -> Result<Dataset, DataError> {
        if tasks.len() != manifest.task_count
            || manifest.train_ids.iter().chain(&manifest.test_ids).any(|&i| i >= tasks.len())
        {
            return Err(DataError::Invalid("manifest does not match the task file".into()));
        }
        Ok(Dataset {
            params: manifest.params,
            info: manifest.info,
            tasks,
            train_ids: manifest.train_ids,
            test_ids: manifest.test_ids,
        })
    }
}
